#pragma once

// CSV and SVG output for experiment results.
//
// Report CSV columns, in order:
//   variant,gamma,n_samples,count_forget_pretrained,count_forget_unlearned,
//   pul_percent,u_fid,u_fid_pretrained,unlearn_seed,eval_seed
// Reals are written with %.17g so that reading a file back gives the same doubles.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vdu/errors.hpp"
#include "vdu/eval.hpp"
#include "vdu/unlearn.hpp"

namespace vdu {

inline const char* kReportHeader =
    "variant,gamma,n_samples,count_forget_pretrained,count_forget_unlearned,pul_percent,u_fid,u_fid_pretrained,"
    "unlearn_seed,eval_seed";

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_real(const std::string& s, const std::string& where) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || end != s.data() + s.size())
    throw FormatError(FormatError::Kind::parse, where + ": not a number: '" + s + "'");
  return v;
}

inline long long parse_integer(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(FormatError::Kind::parse, where + ": not an integer: '" + s + "'");
  }
}

inline std::uint64_t parse_unsigned(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size() || s.front() == '-') throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(FormatError::Kind::parse, where + ": not an unsigned integer: '" + s + "'");
  }
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot write " + path);
  return f;
}

inline void close_out(std::ofstream& f, const std::string& path) {
  f.close();
  if (!f) throw FormatError(FormatError::Kind::io, "write failed for " + path);
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot open " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

}  // namespace detail

inline std::string report_row(const EvalReport& r) {
  std::string s = r.variant;
  for (const auto& cell :
       {format_real(r.gamma), std::to_string(r.n_samples), std::to_string(r.count_forget_pretrained),
        std::to_string(r.count_forget_unlearned), format_real(r.pul_percent), format_real(r.u_fid),
        format_real(r.u_fid_pretrained), std::to_string(r.unlearn_seed), std::to_string(r.eval_seed)})
    s += "," + cell;
  return s;
}

inline void write_reports_csv(const std::string& path, const std::vector<EvalReport>& rows) {
  auto f = detail::open_out(path);
  f << kReportHeader << "\n";
  for (const auto& r : rows) f << report_row(r) << "\n";
  detail::close_out(f, path);
}

inline std::vector<EvalReport> read_reports_csv(const std::string& path) {
  const auto lines = detail::read_lines(path);
  if (lines.empty() || lines.front() != kReportHeader)
    throw FormatError(FormatError::Kind::parse, path + ": missing or unexpected header");
  std::vector<EvalReport> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = path + ":" + std::to_string(i + 1);
    const auto c = detail::split_csv_line(lines[i]);
    if (c.size() != 10) throw FormatError(FormatError::Kind::parse, where + ": expected 10 columns");
    EvalReport r;
    r.variant = c[0];
    r.gamma = detail::parse_real(c[1], where);
    r.n_samples = static_cast<long>(detail::parse_integer(c[2], where));
    r.count_forget_pretrained = static_cast<long>(detail::parse_integer(c[3], where));
    r.count_forget_unlearned = static_cast<long>(detail::parse_integer(c[4], where));
    r.pul_percent = detail::parse_real(c[5], where);
    r.u_fid = detail::parse_real(c[6], where);
    r.u_fid_pretrained = detail::parse_real(c[7], where);
    r.unlearn_seed = detail::parse_unsigned(c[8], where);
    r.eval_seed = detail::parse_unsigned(c[9], where);
    rows.push_back(std::move(r));
  }
  return rows;
}

/// gamma,epoch,loss_a,loss_b,loss_total,param_distance. Wall-clock time is left out so reruns match byte for byte.
inline void write_unlearn_record_csv(const std::string& path, const std::vector<std::pair<double, UnlearnRunRecord>>& runs) {
  auto f = detail::open_out(path);
  f << "gamma,epoch,loss_a,loss_b,loss_total,param_distance\n";
  for (const auto& [gamma, rec] : runs)
    for (std::size_t e = 0; e < rec.loss_a.size(); ++e)
      f << format_real(gamma) << "," << e + 1 << "," << format_real(rec.loss_a[e]) << "," << format_real(rec.loss_b[e])
        << "," << format_real(rec.loss_total[e]) << "," << format_real(rec.param_distance[e]) << "\n";
  detail::close_out(f, path);
}

struct UnlearnTraceRow {
  double gamma = 0.0;
  int epoch = 0;
  double loss_a = 0.0, loss_b = 0.0, loss_total = 0.0, param_distance = 0.0;
};

inline std::vector<UnlearnTraceRow> read_unlearn_record_csv(const std::string& path) {
  const auto lines = detail::read_lines(path);
  if (lines.empty() || lines.front() != "gamma,epoch,loss_a,loss_b,loss_total,param_distance")
    throw FormatError(FormatError::Kind::parse, path + ": missing or unexpected header");
  std::vector<UnlearnTraceRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = path + ":" + std::to_string(i + 1);
    const auto c = detail::split_csv_line(lines[i]);
    if (c.size() != 6) throw FormatError(FormatError::Kind::parse, where + ": expected 6 columns");
    rows.push_back({detail::parse_real(c[0], where), static_cast<int>(detail::parse_integer(c[1], where)),
                    detail::parse_real(c[2], where), detail::parse_real(c[3], where), detail::parse_real(c[4], where),
                    detail::parse_real(c[5], where)});
  }
  return rows;
}

/// x0,x1,...,label per generated sample.
inline void write_samples_csv(const std::string& path, const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw ConfigError("one label per sample row required");
  auto f = detail::open_out(path);
  for (Eigen::Index c = 0; c < x.cols(); ++c) f << "x" << c << ",";
  f << "label\n";
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) f << format_real(x(r, c)) << ",";
    f << labels[static_cast<std::size_t>(r)] << "\n";
  }
  detail::close_out(f, path);
}

struct ScatterPanel {
  std::string title;
  Eigen::MatrixXd points;  // n x 2
  std::vector<int> labels;
};

/// Side-by-side scatter plots, one panel per entry, colored by label; the highlight label is drawn in red.
inline std::string scatter_svg(const std::vector<ScatterPanel>& panels, int highlight_label) {
  const double size = 320, pad = 24;
  double lo = -1, hi = 1;
  for (const auto& p : panels)
    if (p.points.size() > 0) {
      lo = std::min(lo, p.points.minCoeff());
      hi = std::max(hi, p.points.maxCoeff());
    }
  const double span = hi - lo;
  static const char* palette[] = {"#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream svg;
  const double width = panels.size() * (size + pad) + pad, height = size + 2 * pad + 16;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const double x0 = pad + i * (size + pad), y0 = pad + 16;
    svg << "<text x=\"" << x0 << "\" y=\"" << pad << "\" font-family=\"sans-serif\" font-size=\"13\">" << panels[i].title
        << "</text>\n";
    svg << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << size << "\" height=\"" << size
        << "\" fill=\"none\" stroke=\"#ccc\"/>\n";
    const auto& pts = panels[i].points;
    for (Eigen::Index r = 0; r < pts.rows(); ++r) {
      const int label = panels[i].labels[static_cast<std::size_t>(r)];
      const char* color = label == highlight_label ? "#d62728" : palette[static_cast<unsigned>(label) % 8];
      char buf[160];
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"1.3\" fill=\"%s\"/>\n",
                    x0 + (pts(r, 0) - lo) / span * size, y0 + size - (pts(r, 1) - lo) / span * size, color);
      svg << buf;
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  auto f = detail::open_out(path);
  f << text;
  detail::close_out(f, path);
}

}  // namespace vdu
