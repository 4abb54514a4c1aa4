#pragma once

// Grid rasters of city activity, sample windowing, normalization, splits,
// and the seeded synthetic multi-city generator.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metast/error.hpp"
#include "metast/params.hpp"
#include "metast/st_net.hpp"
#include "metast/tensor.hpp"

namespace metast::data {

enum class Interval { hour, month };

inline std::string to_string(Interval i) { return i == Interval::hour ? "hour" : "month"; }
inline Interval interval_from_string(const std::string& s) {
  if (s == "hour") return Interval::hour;
  if (s == "month") return Interval::month;
  throw ConfigError("unknown interval '" + s + "' (expected hour or month)");
}

/// Intervals per period: 24 hours per day, 12 months per year.
inline std::size_t default_period(Interval i) { return i == Interval::hour ? 24 : 12; }

// ---------------------------------------------------------------------------
// Calendar helpers (proleptic Gregorian, UTC)

inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

struct CivilDate {
  std::int64_t year;
  unsigned month;
  unsigned day;
};

inline CivilDate civil_from_days(std::int64_t z) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const auto doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t y = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  return {y + (m <= 2), m, d};
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  return a / b - ((a % b != 0) && ((a < 0) != (b < 0)));
}

/// Months since 1970-01 for an epoch second.
inline std::int64_t epoch_month(std::int64_t t) {
  const CivilDate c = civil_from_days(floor_div(t, 86400));
  return (c.year - 1970) * 12 + static_cast<std::int64_t>(c.month) - 1;
}

/// Start of the interval containing t.
inline std::int64_t interval_floor(std::int64_t t, Interval iv) {
  if (iv == Interval::hour) return floor_div(t, 3600) * 3600;
  const std::int64_t m = epoch_month(t);
  const std::int64_t y = 1970 + floor_div(m, 12);
  const auto mon = static_cast<unsigned>(m - floor_div(m, 12) * 12 + 1);
  return days_from_civil(y, mon, 1) * 86400;
}

/// Interval index of t relative to t0 (may be negative).
inline std::int64_t interval_index(std::int64_t t, std::int64_t t0, Interval iv) {
  if (iv == Interval::hour) return floor_div(t - t0, 3600);
  return epoch_month(t) - epoch_month(t0);
}

/// Phase (hour of day or month of year, zero-based) of interval 0 at t0.
inline std::size_t phase_offset(std::int64_t t0, Interval iv) {
  if (iv == Interval::hour) return static_cast<std::size_t>(floor_div(t0, 3600) - floor_div(floor_div(t0, 3600), 24) * 24);
  const std::int64_t m = epoch_month(t0);
  return static_cast<std::size_t>(m - floor_div(m, 12) * 12);
}

/// Parses epoch seconds or "YYYY-MM-DD[ T]HH:MM[:SS]" / "YYYY-MM-DD" (UTC).
inline std::optional<std::int64_t> parse_timestamp(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '"' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.find('-') == std::string_view::npos || s.front() == '-') {
    double v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return static_cast<std::int64_t>(std::floor(v));
  }
  int Y = 0, M = 0, D = 0, h = 0, mi = 0, sec = 0;
  auto num = [&](std::size_t pos, std::size_t len, int& out) {
    if (pos + len > s.size()) return false;
    auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return ec == std::errc() && ptr == s.data() + pos + len;
  };
  if (!num(0, 4, Y) || s[4] != '-' || !num(5, 2, M) || s.size() < 10 || s[7] != '-' || !num(8, 2, D)) {
    return std::nullopt;
  }
  if (s.size() > 10) {
    if ((s[10] != ' ' && s[10] != 'T') || !num(11, 2, h) || s.size() < 16 || s[13] != ':' || !num(14, 2, mi)) {
      return std::nullopt;
    }
    if (s.size() >= 19 && s[16] == ':' && !num(17, 2, sec)) return std::nullopt;
  }
  if (M < 1 || M > 12 || D < 1 || D > 31 || h > 23 || mi > 59 || sec > 60) return std::nullopt;
  return days_from_civil(Y, static_cast<unsigned>(M), static_cast<unsigned>(D)) * 86400 + h * 3600 + mi * 60 + sec;
}

// ---------------------------------------------------------------------------
// Grid series

struct BoundingBox {
  double min_lat = 0, min_lon = 0, max_lat = 0, max_lon = 0;

  bool valid() const { return max_lat > min_lat && max_lon > min_lon; }
  bool contains(double lat, double lon) const {
    return lat >= min_lat && lat <= max_lat && lon >= min_lon && lon <= max_lon;
  }
};

/// Per-channel min/max fitted on a training span; maps to [-1, 1].
struct Normalization {
  std::vector<double> min;
  std::vector<double> max;

  double normalize(std::size_t ch, double x) const {
    const double range = max.at(ch) - min.at(ch);
    if (range <= 0.0) return 0.0;
    return 2.0 * (x - min[ch]) / range - 1.0;
  }
  double denormalize(std::size_t ch, double y) const {
    const double range = max.at(ch) - min.at(ch);
    if (range <= 0.0) return min[ch];
    return (y + 1.0) * 0.5 * range + min[ch];
  }
};

struct GridSeries {
  std::string city_id;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Interval interval = Interval::hour;
  std::int64_t t0 = 0;  // epoch second at the start of interval 0
  Tensor values;        // [T, rows, cols, v]
  std::optional<Tensor> observed;  // [T, rows, cols]; 0 where carried forward
  std::optional<BoundingBox> bbox;
  std::optional<Normalization> norm;

  std::size_t steps() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(3); }
  std::size_t regions() const { return rows * cols; }

  double at(std::size_t t, std::size_t region, std::size_t ch) const {
    return values[((t * regions()) + region) * channels() + ch];
  }
  double& at(std::size_t t, std::size_t region, std::size_t ch) {
    return values[((t * regions()) + region) * channels() + ch];
  }
  bool is_observed(std::size_t t, std::size_t region) const {
    return !observed || (*observed)[t * regions() + region] != 0.0;
  }
};

inline Normalization fit_normalization(const GridSeries& series, std::size_t train_end) {
  if (train_end == 0 || train_end > series.steps()) {
    throw DataError("normalization span must cover 1.." + std::to_string(series.steps()) + " intervals");
  }
  const std::size_t v = series.channels();
  Normalization n{std::vector<double>(v, std::numeric_limits<double>::infinity()),
                  std::vector<double>(v, -std::numeric_limits<double>::infinity())};
  for (std::size_t t = 0; t < train_end; ++t)
    for (std::size_t r = 0; r < series.regions(); ++r)
      for (std::size_t ch = 0; ch < v; ++ch) {
        const double x = series.at(t, r, ch);
        n.min[ch] = std::min(n.min[ch], x);
        n.max[ch] = std::max(n.max[ch], x);
      }
  return n;
}

/// Copy of `raw` with values mapped through a normalization fitted on
/// [0, train_end). Values outside the training range may exceed [-1, 1].
inline GridSeries normalize(const GridSeries& raw, std::size_t train_end) {
  GridSeries out = raw;
  out.norm = fit_normalization(raw, train_end);
  const std::size_t v = raw.channels();
  auto d = out.values.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = out.norm->normalize(i % v, d[i]);
  return out;
}

inline double denormalize(const Normalization& norm, std::size_t ch, double y) { return norm.denormalize(ch, y); }

// ---------------------------------------------------------------------------
// Splits

struct SplitMode {
  enum class Kind { source, target } kind = Kind::source;
  std::size_t train_intervals = 0;  // target mode only

  static SplitMode source() { return {}; }
  static SplitMode target(std::size_t intervals) { return {Kind::target, intervals}; }
  /// 1/3/7-day windows on hourly data, or years on monthly data.
  static SplitMode target_units(std::size_t units, Interval iv) {
    return target(units * default_period(iv));
  }
};

struct Split {
  std::size_t train_begin = 0;
  std::size_t train_end = 0;  // exclusive; test span is [train_end, total)
  std::size_t total = 0;
};

inline Split split(std::size_t steps, SplitMode mode) {
  Split s;
  s.total = steps;
  if (mode.kind == SplitMode::Kind::source) {
    s.train_end = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(steps)));
  } else {
    s.train_end = mode.train_intervals;
  }
  if (s.train_end == 0 || s.train_end >= steps) {
    throw DataError("series of " + std::to_string(steps) + " intervals is too short for the requested split");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Sample windowing

/// One sample per (region, target interval tau) with tau in
/// [max(window, begin), end): inputs are intervals tau-window .. tau-1, each an
/// N x N patch centred on the region (zero outside the grid). Regions whose
/// target is unobserved are skipped.
inline std::vector<net::TrainingSample> make_samples(const GridSeries& series, std::size_t window,
                                                     std::size_t patch, std::size_t begin = 0,
                                                     std::size_t end = std::size_t(-1)) {
  if (patch % 2 == 0) throw ConfigError("patch size must be odd");
  if (window == 0) throw ConfigError("window must be positive");
  end = std::min(end, series.steps());
  if (series.steps() <= window) {
    throw DataError("series of " + std::to_string(series.steps()) + " intervals is too short for window " +
                    std::to_string(window));
  }
  const std::size_t v = series.channels();
  const auto half = static_cast<std::ptrdiff_t>(patch / 2);
  const auto R = static_cast<std::ptrdiff_t>(series.rows);
  const auto C = static_cast<std::ptrdiff_t>(series.cols);
  const std::size_t pv = patch * patch * v;
  std::vector<net::TrainingSample> out;
  for (std::size_t tau = std::max(window, begin); tau < end; ++tau) {
    for (std::ptrdiff_t i = 0; i < R; ++i)
      for (std::ptrdiff_t j = 0; j < C; ++j) {
        const auto region = static_cast<std::size_t>(i * C + j);
        if (!series.is_observed(tau, region)) continue;
        net::TrainingSample s;
        s.region = region;
        s.time = tau;
        s.patches.assign(window * pv, 0.0);
        for (std::size_t w = 0; w < window; ++w) {
          const std::size_t t = tau - window + w;
          for (std::ptrdiff_t di = -half; di <= half; ++di)
            for (std::ptrdiff_t dj = -half; dj <= half; ++dj) {
              const std::ptrdiff_t si = i + di, sj = j + dj;
              if (si < 0 || si >= R || sj < 0 || sj >= C) continue;
              const std::size_t dst = w * pv + (static_cast<std::size_t>(di + half) * patch + static_cast<std::size_t>(dj + half)) * v;
              const auto src_region = static_cast<std::size_t>(si * C + sj);
              for (std::size_t ch = 0; ch < v; ++ch) s.patches[dst + ch] = series.at(t, src_region, ch);
            }
        }
        s.target.resize(v);
        for (std::size_t ch = 0; ch < v; ++ch) s.target[ch] = series.at(tau, region, ch);
        out.push_back(std::move(s));
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rasterization

struct TripRecord {
  std::int64_t pickup_time = 0;
  double pickup_lat = 0, pickup_lon = 0;
  std::optional<std::int64_t> dropoff_time;
  std::optional<double> dropoff_lat, dropoff_lon;
};

struct RasterOptions {
  BoundingBox bbox;
  std::size_t rows = 1;
  std::size_t cols = 1;
  Interval interval = Interval::hour;
  std::optional<std::int64_t> t0;     // default: interval containing the earliest pickup
  std::optional<std::size_t> steps;   // default: through the latest pickup
};

struct RasterReport {
  std::array<std::size_t, 2> accepted{0, 0};  // pickups, drop-offs
  std::array<std::size_t, 2> out_of_bbox{0, 0};
  std::array<std::size_t, 2> out_of_span{0, 0};
  std::size_t malformed = 0;
};

namespace detail {

inline std::optional<std::size_t> cell_of(const BoundingBox& box, std::size_t rows, std::size_t cols,
                                          double lat, double lon) {
  if (!std::isfinite(lat) || !std::isfinite(lon) || !box.contains(lat, lon)) return std::nullopt;
  auto idx = [](double x, double lo, double hi, std::size_t n) {
    auto k = static_cast<std::size_t>(std::floor((x - lo) / (hi - lo) * static_cast<double>(n)));
    return std::min(k, n - 1);
  };
  return idx(lat, box.min_lat, box.max_lat, rows) * cols + idx(lon, box.min_lon, box.max_lon, cols);
}

}  // namespace detail

/// Channel 0 counts pick-ups, channel 1 drop-offs, per cell per interval.
/// Records outside the box or the time span are counted and skipped.
inline GridSeries rasterize(std::span<const TripRecord> records, const RasterOptions& opt,
                            RasterReport* report = nullptr) {
  if (opt.rows == 0 || opt.cols == 0) throw ConfigError("grid needs at least one row and column");
  if (!opt.bbox.valid()) throw ConfigError("invalid bounding box");
  RasterReport rep;
  std::int64_t t0 = 0;
  std::size_t steps = 0;
  if (opt.t0) {
    t0 = interval_floor(*opt.t0, opt.interval);
  } else {
    if (records.empty()) throw DataError("no usable records");
    std::int64_t lo = records[0].pickup_time;
    for (const auto& r : records) lo = std::min(lo, r.pickup_time);
    t0 = interval_floor(lo, opt.interval);
  }
  if (opt.steps) {
    steps = *opt.steps;
  } else {
    std::int64_t hi = 0;
    for (const auto& r : records) hi = std::max(hi, interval_index(r.pickup_time, t0, opt.interval));
    steps = static_cast<std::size_t>(hi + 1);
  }
  if (steps == 0) throw DataError("empty time span");

  GridSeries g;
  g.rows = opt.rows;
  g.cols = opt.cols;
  g.interval = opt.interval;
  g.t0 = t0;
  g.bbox = opt.bbox;
  g.values = Tensor(Shape{steps, opt.rows, opt.cols, 2});

  auto place = [&](int ch, std::int64_t t, double lat, double lon) {
    const auto cell = detail::cell_of(opt.bbox, opt.rows, opt.cols, lat, lon);
    if (!cell) {
      ++rep.out_of_bbox[ch];
      return;
    }
    const std::int64_t k = interval_index(t, t0, opt.interval);
    if (k < 0 || k >= static_cast<std::int64_t>(steps)) {
      ++rep.out_of_span[ch];
      return;
    }
    g.at(static_cast<std::size_t>(k), *cell, static_cast<std::size_t>(ch)) += 1.0;
    ++rep.accepted[ch];
  };
  for (const auto& r : records) {
    place(0, r.pickup_time, r.pickup_lat, r.pickup_lon);
    if (r.dropoff_time && r.dropoff_lat && r.dropoff_lon) place(1, *r.dropoff_time, *r.dropoff_lat, *r.dropoff_lon);
  }
  if (report) *report = rep;
  if (rep.accepted[0] + rep.accepted[1] == 0) throw DataError("no usable records inside the grid and span");
  return g;
}

// ---------------------------------------------------------------------------
// CSV ingestion

/// Column names of a trip CSV; empty drop-off names mean "not present".
struct TripColumns {
  std::string pickup_time = "pickup_time";
  std::string pickup_lat = "pickup_lat";
  std::string pickup_lon = "pickup_lon";
  std::string dropoff_time = "dropoff_time";
  std::string dropoff_lat = "dropoff_lat";
  std::string dropoff_lon = "dropoff_lon";
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

namespace detail {

inline std::optional<double> parse_double(const std::string& s) {
  std::string_view v = s;
  while (!v.empty() && v.front() == ' ') v.remove_prefix(1);
  while (!v.empty() && v.back() == ' ') v.remove_suffix(1);
  if (v.empty()) return std::nullopt;
  double x = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || ptr != v.data() + v.size()) return std::nullopt;
  return x;
}

inline std::optional<std::size_t> column_index(const std::vector<std::string>& header, const std::string& name) {
  if (name.empty()) return std::nullopt;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return i;
  }
  throw ConfigError("column '" + name + "' not found in CSV header");
}

}  // namespace detail

/// Streams a trip CSV with a header row. Malformed rows are counted and skipped.
inline std::vector<TripRecord> read_trip_csv(std::istream& in, const TripColumns& cols, std::size_t* malformed = nullptr) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty trip CSV");
  const auto header = split_csv_line(line);
  const std::size_t pt = *detail::column_index(header, cols.pickup_time);
  const std::size_t plat = *detail::column_index(header, cols.pickup_lat);
  const std::size_t plon = *detail::column_index(header, cols.pickup_lon);
  const auto dt = detail::column_index(header, cols.dropoff_time);
  const auto dlat = detail::column_index(header, cols.dropoff_lat);
  const auto dlon = detail::column_index(header, cols.dropoff_lon);
  std::vector<TripRecord> out;
  std::size_t bad = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    auto field = [&](std::size_t i) -> const std::string* { return i < f.size() ? &f[i] : nullptr; };
    TripRecord r;
    const std::string* a = field(pt);
    const std::string* b = field(plat);
    const std::string* c = field(plon);
    std::optional<std::int64_t> t = a ? parse_timestamp(*a) : std::nullopt;
    std::optional<double> lat = b ? detail::parse_double(*b) : std::nullopt;
    std::optional<double> lon = c ? detail::parse_double(*c) : std::nullopt;
    if (!t || !lat || !lon) {
      ++bad;
      continue;
    }
    r.pickup_time = *t;
    r.pickup_lat = *lat;
    r.pickup_lon = *lon;
    if (dt && dlat && dlon && field(*dt) && field(*dlat) && field(*dlon)) {
      const auto dtime = parse_timestamp(*field(*dt));
      const auto la = detail::parse_double(*field(*dlat));
      const auto lo = detail::parse_double(*field(*dlon));
      if (dtime && la && lo) {
        r.dropoff_time = dtime;
        r.dropoff_lat = la;
        r.dropoff_lon = lo;
      }
    }
    out.push_back(r);
  }
  if (malformed) *malformed = bad;
  return out;
}

struct WaterSample {
  double lon = 0, lat = 0;
  std::int64_t time = 0;
  double ph = 0;
};

/// Water-sample CSV with columns lon, lat, date, ph (header required).
inline std::vector<WaterSample> read_water_csv(std::istream& in, std::size_t* malformed = nullptr) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty water CSV");
  const auto header = split_csv_line(line);
  const std::size_t ilon = *detail::column_index(header, "lon");
  const std::size_t ilat = *detail::column_index(header, "lat");
  const std::size_t idate = *detail::column_index(header, "date");
  const std::size_t iph = *detail::column_index(header, "ph");
  std::vector<WaterSample> out;
  std::size_t bad = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    const std::size_t need = std::max({ilon, ilat, idate, iph});
    if (f.size() <= need) {
      ++bad;
      continue;
    }
    const auto lon = detail::parse_double(f[ilon]);
    const auto lat = detail::parse_double(f[ilat]);
    const auto t = parse_timestamp(f[idate]);
    const auto ph = detail::parse_double(f[iph]);
    if (!lon || !lat || !t || !ph) {
      ++bad;
      continue;
    }
    out.push_back({*lon, *lat, *t, *ph});
  }
  if (malformed) *malformed = bad;
  return out;
}

/// Monthly grid of median pH per cell (cell_deg x cell_deg). Cells without
/// samples in a month carry the previous month's value and are marked
/// unobserved; make_samples skips unobserved targets.
inline GridSeries rasterize_water(std::span<const WaterSample> samples, const BoundingBox& box, double cell_deg,
                                  std::optional<std::int64_t> t0_opt = std::nullopt,
                                  std::optional<std::size_t> steps_opt = std::nullopt) {
  if (!box.valid()) throw ConfigError("invalid bounding box");
  if (!(cell_deg > 0)) throw ConfigError("cell size must be positive");
  if (samples.empty()) throw DataError("no water samples");
  const auto rows = static_cast<std::size_t>(std::ceil((box.max_lat - box.min_lat) / cell_deg - 1e-9));
  const auto cols = static_cast<std::size_t>(std::ceil((box.max_lon - box.min_lon) / cell_deg - 1e-9));
  std::int64_t lo = samples[0].time, hi = samples[0].time;
  for (const auto& s : samples) {
    lo = std::min(lo, s.time);
    hi = std::max(hi, s.time);
  }
  const std::int64_t t0 = interval_floor(t0_opt.value_or(lo), Interval::month);
  const std::size_t steps = steps_opt.value_or(static_cast<std::size_t>(interval_index(hi, t0, Interval::month) + 1));
  std::vector<std::vector<double>> bucket(steps * rows * cols);
  for (const auto& s : samples) {
    const auto cell = detail::cell_of(box, rows, cols, s.lat, s.lon);
    const std::int64_t k = interval_index(s.time, t0, Interval::month);
    if (!cell || k < 0 || k >= static_cast<std::int64_t>(steps)) continue;
    bucket[static_cast<std::size_t>(k) * rows * cols + *cell].push_back(s.ph);
  }
  GridSeries g;
  g.rows = rows;
  g.cols = cols;
  g.interval = Interval::month;
  g.t0 = t0;
  g.bbox = box;
  g.values = Tensor(Shape{steps, rows, cols, 1});
  g.observed = Tensor(Shape{steps, rows, cols});
  std::size_t accepted = 0;
  for (std::size_t r = 0; r < rows * cols; ++r) {
    std::optional<double> last;
    for (std::size_t t = 0; t < steps; ++t) {
      auto& b = bucket[t * rows * cols + r];
      if (!b.empty()) {
        std::sort(b.begin(), b.end());
        const std::size_t n = b.size();
        last = n % 2 ? b[n / 2] : 0.5 * (b[n / 2 - 1] + b[n / 2]);
        (*g.observed)[t * rows * cols + r] = 1.0;
        accepted += n;
      }
      g.at(t, r, 0) = last.value_or(0.0);
    }
  }
  if (accepted == 0) throw DataError("no water samples inside the grid and span");
  return g;
}

// ---------------------------------------------------------------------------
// Persistence: values in the checkpoint container under "grid.values"
// (and "grid.observed"), metadata in a JSON sidecar.

inline void save_grid(const std::string& path, const GridSeries& g) {
  ParamSet p;
  p.set("grid.values", g.values);
  if (g.observed) p.set("grid.observed", *g.observed);
  save_checkpoint(path, p);
  nlohmann::json meta;
  meta["city_id"] = g.city_id;
  meta["rows"] = g.rows;
  meta["cols"] = g.cols;
  meta["interval"] = to_string(g.interval);
  meta["t0"] = g.t0;
  if (g.bbox) meta["bbox"] = {g.bbox->min_lat, g.bbox->min_lon, g.bbox->max_lat, g.bbox->max_lon};
  if (g.norm) meta["norm"] = {{"min", g.norm->min}, {"max", g.norm->max}};
  std::ofstream os(path + ".json");
  if (!os) throw DataError("cannot write '" + path + ".json'");
  os << meta.dump(2) << '\n';
}

inline GridSeries load_grid(const std::string& path) {
  const ParamSet p = load_checkpoint(path);
  std::ifstream is(path + ".json");
  if (!is) throw DataError("missing grid sidecar '" + path + ".json'");
  nlohmann::json meta;
  try {
    is >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad grid sidecar: ") + e.what());
  }
  GridSeries g;
  g.city_id = meta.value("city_id", "");
  g.rows = meta.at("rows").get<std::size_t>();
  g.cols = meta.at("cols").get<std::size_t>();
  g.interval = interval_from_string(meta.at("interval").get<std::string>());
  g.t0 = meta.at("t0").get<std::int64_t>();
  if (meta.contains("bbox")) {
    const auto b = meta["bbox"].get<std::vector<double>>();
    g.bbox = BoundingBox{b.at(0), b.at(1), b.at(2), b.at(3)};
  }
  if (meta.contains("norm")) {
    g.norm = Normalization{meta["norm"]["min"].get<std::vector<double>>(), meta["norm"]["max"].get<std::vector<double>>()};
  }
  g.values = p.at("grid.values");
  if (g.values.rank() != 4 || g.values.dim(1) != g.rows || g.values.dim(2) != g.cols) {
    throw DataError("grid values do not match sidecar dimensions");
  }
  if (p.contains("grid.observed")) g.observed = p.at("grid.observed");
  return g;
}

// ---------------------------------------------------------------------------
// Synthetic multi-city benchmark

/// Periodic shapes shared across cities.
enum class Archetype : int { flat = 0, early_peak = 1, late_peak = 2, double_peak = 3 };
inline constexpr std::size_t kArchetypes = 4;

inline const char* archetype_name(int a) {
  static const char* const names[] = {"flat", "early-peak", "late-peak", "double-peak"};
  return a >= 0 && a < static_cast<int>(kArchetypes) ? names[a] : "unknown";
}

namespace detail {

inline double bump(double phase, double centre, double width) {
  double d = std::fabs(phase - centre);
  d = std::min(d, 1.0 - d);
  return std::exp(-0.5 * d * d / (width * width));
}

}  // namespace detail

/// Expected level of an archetype at a phase in [0, 1) of its period. On a
/// 24-hour day the morning peak sits at 08:00 and is sharp and tall, the
/// evening peak at 18:00 is broad and lower, and the double-peak profile has
/// two medium peaks over a raised baseline. Each archetype therefore also
/// differs in local shape, not only in peak timing.
inline double archetype_value(Archetype a, double phase) {
  constexpr double kEarly = 8.0 / 24.0, kLate = 18.0 / 24.0;
  switch (a) {
    case Archetype::flat: return 0.5;
    case Archetype::early_peak: return 0.15 + 1.4 * detail::bump(phase, kEarly, 1.0 / 24.0);
    case Archetype::late_peak: return 0.15 + 0.8 * detail::bump(phase, kLate, 3.0 / 24.0);
    case Archetype::double_peak:
      return 0.3 + 0.8 * (detail::bump(phase, kEarly, 1.5 / 24.0) + detail::bump(phase, kLate, 1.5 / 24.0));
  }
  return 0.0;
}

struct SynthCitySpec {
  std::string name = "city";
  std::size_t rows = 6;
  std::size_t cols = 6;
  Interval interval = Interval::hour;
  std::size_t periods = 14;  // days for hourly data, years for monthly data
  std::size_t channels = 2;  // 2: pick-up and drop-off; 1: a single measurement
  std::array<double, kArchetypes> archetype_mix{1, 1, 1, 1};
  double noise = 0.1;             // raw-unit Gaussian sigma
  double scale = 1.0;             // city-wide amplitude
  double offset = 0.0;            // city-wide baseline added to every value
  double amplitude_jitter = 0.1;  // per-region amplitude in scale * (1 +- jitter)
  double phase_shift = 0.0;       // in intervals, city-wide
  double missing_rate = 0.0;      // probability that a cell-interval is unobserved
  std::int64_t t0 = 1420070400;   // 2015-01-01 00:00 UTC
};

struct CityDataset {
  std::string name;
  GridSeries series;           // raw units
  std::vector<int> archetype;  // ground truth per region
};

/// Region value = offset + amplitude * archetype(phase - shift) + N(0, sigma).
/// A second channel follows the same archetype one interval later at 0.8
/// scale. Unobserved cells carry the previous value forward.
inline CityDataset synth_city(const SynthCitySpec& spec, std::uint64_t seed) {
  if (spec.rows == 0 || spec.cols == 0 || spec.periods == 0) throw ConfigError("synthetic city needs positive size");
  if (spec.channels < 1 || spec.channels > 2) throw ConfigError("synthetic cities have 1 or 2 channels");
  if (!(spec.noise >= 0)) throw ConfigError("noise must be non-negative");
  if (!(spec.missing_rate >= 0 && spec.missing_rate < 1)) throw ConfigError("missing_rate must be in [0, 1)");
  double mix_total = 0;
  for (double w : spec.archetype_mix) {
    if (!(w >= 0)) throw ConfigError("archetype weights must be non-negative");
    mix_total += w;
  }
  if (mix_total <= 0) throw ConfigError("archetype mix must have positive weight");
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> pick(spec.archetype_mix.begin(), spec.archetype_mix.end());
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  CityDataset c;
  c.name = spec.name;
  const std::size_t R = spec.rows * spec.cols;
  std::vector<double> amp(R);
  for (std::size_t r = 0; r < R; ++r) {
    c.archetype.push_back(pick(rng));
    amp[r] = spec.scale * (1.0 + spec.amplitude_jitter * unit(rng));
  }
  const std::size_t P = default_period(spec.interval);
  const std::size_t T = spec.periods * P;
  GridSeries& g = c.series;
  g.city_id = spec.name;
  g.rows = spec.rows;
  g.cols = spec.cols;
  g.interval = spec.interval;
  g.t0 = interval_floor(spec.t0, spec.interval);
  g.values = Tensor(Shape{T, spec.rows, spec.cols, spec.channels});
  if (spec.missing_rate > 0) g.observed = Tensor(Shape{T, spec.rows, spec.cols}, 1.0);
  const auto Pd = static_cast<double>(P);
  const double phase0 = static_cast<double>(phase_offset(g.t0, spec.interval));
  for (std::size_t t = 0; t < T; ++t) {
    const double k = std::fmod(phase0 + static_cast<double>(t) - spec.phase_shift + 2.0 * Pd, Pd);
    for (std::size_t r = 0; r < R; ++r) {
      const auto a = static_cast<Archetype>(c.archetype[r]);
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        const double lag = static_cast<double>(ch);
        const double level = ch == 0 ? 1.0 : 0.8;
        const double phase = std::fmod(k - lag + Pd, Pd) / Pd;
        const double e = spec.noise > 0 ? spec.noise * noise(rng) : 0.0;
        g.at(t, r, ch) = spec.offset + level * amp[r] * archetype_value(a, phase) + e;
      }
      if (spec.missing_rate > 0 && coin(rng) < spec.missing_rate) {
        (*g.observed)[t * R + r] = 0.0;
        for (std::size_t ch = 0; ch < spec.channels; ++ch) g.at(t, r, ch) = t ? g.at(t - 1, r, ch) : spec.offset;
      }
    }
  }
  return c;
}

/// Independent cities derived from one seed.
inline std::vector<CityDataset> synth_cities(std::span<const SynthCitySpec> specs, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::vector<std::uint32_t> raw(specs.size() * 2);
  seq.generate(raw.begin(), raw.end());
  std::vector<CityDataset> out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    out.push_back(synth_city(specs[i], (std::uint64_t(raw[2 * i]) << 32) | raw[2 * i + 1]));
  }
  return out;
}

}  // namespace metast::data
