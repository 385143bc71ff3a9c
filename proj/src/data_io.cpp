#include "tsrm/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "tsrm/log.hpp"
#include "tsrm/rng.hpp"

namespace tsrm {
namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string lower(std::string s) {
  for (auto& c : s) c = char(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split_row(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool is_missing_cell(const std::string& c) {
  return c.empty() || lower(c) == "nan";
}

bool parse_number(const std::string& c, double& out) {
  const char* first = c.data();
  const char* last = first + c.size();
  if (first != last && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && std::isfinite(out);
}

}  // namespace

Json to_json(const NormStats& s) {
  return Json{{"columns", s.columns}, {"min", s.min}, {"max", s.max}};
}

NormStats norm_stats_from_json(const Json& j) {
  NormStats s;
  try {
    s.columns = j.at("columns").get<std::vector<std::string>>();
    s.min = j.at("min").get<std::vector<double>>();
    s.max = j.at("max").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptCheckpoint,
         std::string("normalization stats: ") + e.what());
  }
  return s;
}

Series parse_csv(std::istream& in, const DataConfig& spec,
                 const std::string& source) {
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Data,
          source + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0)
    line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_row(line);

  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> line_no;
  for (std::size_t ln = 2; std::getline(in, line); ++ln) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto cells = split_row(line);
    require(cells.size() == header.size(), ErrorKind::Data,
            source + ": row " + std::to_string(ln) + " has " +
                std::to_string(cells.size()) + " cells, header has " +
                std::to_string(header.size()));
    rows.push_back(std::move(cells));
    line_no.push_back(ln);
  }

  auto find_col = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  };

  int ts_col = -1;
  if (spec.timestamp_column == "auto") {
    static const char* kNames[] = {"t", "time", "timestamp", "date", "datetime", "ts"};
    const std::string h = lower(header.empty() ? "" : header[0]);
    bool named = std::any_of(std::begin(kNames), std::end(kNames),
                             [&](const char* n) { return h == n; });
    bool textual = false;
    double unused;
    for (const auto& r : rows)
      if (!is_missing_cell(r[0]) && !parse_number(r[0], unused)) textual = true;
    if ((named || textual) && header[0] != spec.label_column &&
        std::find(spec.columns.begin(), spec.columns.end(), header[0]) ==
            spec.columns.end())
      ts_col = 0;
  } else if (!spec.timestamp_column.empty() && spec.timestamp_column != "none") {
    ts_col = find_col(spec.timestamp_column);
    require(ts_col >= 0, ErrorKind::Data,
            source + ": timestamp column '" + spec.timestamp_column +
                "' not found in header");
  }

  int label_col = -1;
  if (!spec.label_column.empty()) {
    label_col = find_col(spec.label_column);
    require(label_col >= 0, ErrorKind::Data,
            source + ": label column '" + spec.label_column +
                "' not found in header");
  }

  std::vector<int> cols;
  Series s;
  if (spec.columns.empty()) {
    for (int i = 0; i < int(header.size()); ++i)
      if (i != ts_col && i != label_col) cols.push_back(i);
  } else {
    for (const auto& name : spec.columns) {
      const int c = find_col(name);
      require(c >= 0, ErrorKind::Data,
              source + ": column '" + name + "' not found in header");
      cols.push_back(c);
    }
  }
  require(!cols.empty(), ErrorKind::Data, source + ": no feature columns");
  for (int c : cols) s.columns.push_back(header[c]);

  const Index T = Index(rows.size()), F = Index(cols.size());
  s.values = Grid::Zero(T, F);
  s.observed = MaskGrid::Constant(T, F, false);
  for (Index t = 0; t < T; ++t) {
    for (Index f = 0; f < F; ++f) {
      const auto& cell = rows[t][cols[f]];
      if (is_missing_cell(cell)) continue;
      double v;
      require(parse_number(cell, v), ErrorKind::Data,
              source + ": row " + std::to_string(line_no[t]) + ", column '" +
                  header[cols[f]] + "': cannot parse '" + cell + "'");
      s.values(t, f) = float(v);
      s.observed(t, f) = true;
    }
    if (label_col >= 0) {
      const auto& cell = rows[t][label_col];
      double v;
      require(parse_number(cell, v) && v == std::floor(v) && v >= 0,
              ErrorKind::Data,
              source + ": row " + std::to_string(line_no[t]) + ", column '" +
                  header[label_col] + "': label must be a non-negative integer, got '" +
                  cell + "'");
      s.labels.push_back(int(v));
    }
  }
  return s;
}

Series load_csv(const std::string& path, const DataConfig& spec) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open CSV file '" + path + "'");
  return parse_csv(in, spec, path);
}

void write_csv(const std::string& path, const Series& series) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::Io, "cannot write CSV file '" + path + "'");
  out << "t";
  for (const auto& c : series.columns) out << ',' << c;
  if (!series.labels.empty()) out << ",label";
  out << '\n';
  char buf[32];
  for (Index t = 0; t < series.length(); ++t) {
    out << t;
    for (Index f = 0; f < series.features(); ++f) {
      out << ',';
      if (series.observed(t, f)) {
        std::snprintf(buf, sizeof buf, "%.9g", double(series.values(t, f)));
        out << buf;
      }
    }
    if (!series.labels.empty()) out << ',' << series.labels[t];
    out << '\n';
  }
  require(out.good(), ErrorKind::Io, "write to '" + path + "' failed");
}

NormStats fit_norm_stats(const Series& train) {
  NormStats st;
  st.columns = train.columns;
  for (Index f = 0; f < train.features(); ++f) {
    double lo = INFINITY, hi = -INFINITY;
    for (Index t = 0; t < train.length(); ++t)
      if (train.observed(t, f)) {
        lo = std::min(lo, double(train.values(t, f)));
        hi = std::max(hi, double(train.values(t, f)));
      }
    const std::string name =
        f < Index(train.columns.size()) ? train.columns[f] : std::to_string(f);
    require(std::isfinite(lo), ErrorKind::Data,
            "feature '" + name + "' has no observed training values");
    require(hi > lo, ErrorKind::Data,
            "feature '" + name + "' is constant over the training split (" +
                std::to_string(lo) + ")");
    st.min.push_back(lo);
    st.max.push_back(hi);
  }
  return st;
}

std::size_t normalize(Series& series, const NormStats& stats) {
  require(Index(stats.min.size()) == series.features(), ErrorKind::Data,
          "normalization stats cover " + std::to_string(stats.min.size()) +
              " features, series has " + std::to_string(series.features()));
  std::size_t clamped = 0;
  for (Index t = 0; t < series.length(); ++t)
    for (Index f = 0; f < series.features(); ++f) {
      if (!series.observed(t, f)) continue;
      double v = (double(series.values(t, f)) - stats.min[f]) /
                 (stats.max[f] - stats.min[f]);
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        ++clamped;
      }
      series.values(t, f) = float(v);
    }
  if (clamped) log::info("normalize: clamped " + std::to_string(clamped) +
                         " out-of-range values");
  return clamped;
}

float denormalize(float v, const NormStats& stats, Index feature) {
  return float(double(v) * (stats.max[feature] - stats.min[feature]) +
               stats.min[feature]);
}

Splits chronological_split(const Series& s, double train_fraction,
                           double val_fraction) {
  require(train_fraction > 0 && val_fraction >= 0 &&
              train_fraction + val_fraction <= 1.0,
          ErrorKind::Config, "split fractions must be positive and sum to <= 1");
  const Index T = s.length();
  const Index n_train = Index(std::floor(train_fraction * double(T)));
  const Index n_val = std::min<Index>(
      T - n_train, Index(std::floor(val_fraction * double(T))));
  auto part = [&](Index start, Index len) {
    Series p;
    p.columns = s.columns;
    p.values = s.values.middleRows(start, len);
    p.observed = s.observed.middleRows(start, len);
    if (!s.labels.empty())
      p.labels.assign(s.labels.begin() + start, s.labels.begin() + start + len);
    return p;
  };
  return {part(0, n_train), part(n_train, n_val),
          part(n_train + n_val, T - n_train - n_val)};
}

WindowedDataset make_windows(const Series& s, Index window, Index stride,
                             double max_missing) {
  require(window >= 1 && stride >= 1, ErrorKind::Config,
          "window length and stride must be >= 1");
  require(s.length() >= window, ErrorKind::Data,
          "series of length " + std::to_string(s.length()) +
              " is shorter than the window length " + std::to_string(window));
  WindowedDataset ds;
  ds.window = window;
  ds.features = s.features();
  const Index n = window_count(s.length(), window, stride);
  const double cells = double(window * s.features());
  for (Index w = 0; w < n; ++w) {
    const Index start = w * stride;
    WindowSample ws;
    ws.values = s.values.middleRows(start, window);
    ws.observed = s.observed.middleRows(start, window);
    const double missing = cells - double(ws.observed.count());
    if (missing / cells > max_missing) {
      ++ds.dropped;
      continue;
    }
    if (!s.labels.empty()) {
      std::map<int, int> counts;
      for (Index t = start; t < start + window; ++t) ++counts[s.labels[t]];
      int best = -1, best_count = 0;
      for (auto [label, c] : counts)
        if (c > best_count) best = label, best_count = c;
      ws.label = best;
    }
    ds.samples.push_back(std::move(ws));
  }
  if (ds.dropped)
    log::info("windowing: dropped " + std::to_string(ds.dropped) +
              " windows over the missing-value limit");
  return ds;
}

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "sine") return SynthKind::Sine;
  if (s == "noise") return SynthKind::Noise;
  fail(ErrorKind::Config, "synthetic kind must be sine|noise, got '" + s + "'");
}

namespace {

void fill_synth(SynthKind kind, Grid& g, Rng& rng) {
  for (Index f = 0; f < g.cols(); ++f) {
    if (kind == SynthKind::Noise) {
      for (Index t = 0; t < g.rows(); ++t) g(t, f) = float(rng.uniform());
      continue;
    }
    const double period = rng.uniform(12.0, 32.0);
    const double phase = rng.uniform(0.0, 2.0 * M_PI);
    for (Index t = 0; t < g.rows(); ++t)
      g(t, f) = float(0.5 + 0.4 * std::sin(2.0 * M_PI * double(t) / period + phase));
  }
}

}  // namespace

WindowedDataset synth_dataset(SynthKind kind, Index window, Index features,
                              std::size_t n, std::uint64_t seed) {
  WindowedDataset ds;
  ds.window = window;
  ds.features = features;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    WindowSample s;
    s.values.resize(window, features);
    fill_synth(kind, s.values, rng);
    s.observed = MaskGrid::Constant(window, features, true);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Series synth_series(SynthKind kind, Index length, Index features,
                    std::uint64_t seed) {
  Series s;
  for (Index f = 0; f < features; ++f) s.columns.push_back("x" + std::to_string(f));
  s.values.resize(length, features);
  Rng rng(seed);
  fill_synth(kind, s.values, rng);
  s.observed = MaskGrid::Constant(length, features, true);
  return s;
}

}  // namespace tsrm
