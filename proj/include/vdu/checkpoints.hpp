#pragma once

// Binary checkpoint ("VDU1") and posterior-statistics ("VDUS") containers, and
// the per-parameter mean/std estimate over a set of checkpoints.
//
// Container layout, all integers little-endian:
//   4 bytes   magic ("VDU1" or "VDUS")
//   u32       header length H
//   H bytes   header text: "key=value\n" lines in a fixed canonical order
//   4*N bytes payload, IEEE-754 binary32 values
//   u32       CRC-32 (zlib polynomial) of the payload bytes
// N is d for a checkpoint and 2d for stats (mu_star then sigma_star).

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include <Eigen/Dense>

#include "vdu/denoiser.hpp"
#include "vdu/errors.hpp"
#include "vdu/schedule.hpp"

namespace vdu {

inline constexpr int kFormatVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  std::string dataset;

  bool operator==(const CheckpointMeta&) const = default;
};

struct Checkpoint {
  DenoiserArch arch;
  ScheduleParams schedule;
  CheckpointMeta meta;
  ParamVector params;
};

enum class StatsMode { multi_run, single_run };

inline std::string to_string(StatsMode m) { return m == StatsMode::multi_run ? "multi_run" : "single_run"; }

inline StatsMode stats_mode_from_string(const std::string& s) {
  if (s == "multi_run") return StatsMode::multi_run;
  if (s == "single_run") return StatsMode::single_run;
  throw ConfigError("unknown stats mode '" + s + "'");
}

struct ParamPosteriorStats {
  Eigen::VectorXd mu_star;
  Eigen::VectorXd sigma_star;  // standard deviations, floored
  int n_checkpoints = 0;
  StatsMode mode = StatsMode::multi_run;
  double sigma_floor = 0.0;
  DenoiserArch arch;
  ScheduleParams schedule;
};

/// Rounds every parameter to binary32, the storage precision.
inline ParamVector to_storage_precision(const ParamVector& p) {
  ParamVector out = p;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.values(i) = static_cast<double>(static_cast<float>(out.values(i)));
  return out;
}

namespace detail {

using Header = std::vector<std::pair<std::string, std::string>>;

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<unsigned char>(in[at + i])} << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const char* data, std::size_t len) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(data), static_cast<uInt>(len)));
}

inline void write_container(const std::string& path, const char (&magic)[5], const Header& header,
                            const std::vector<float>& payload) {
  std::string text;
  for (const auto& [k, v] : header) text += k + "=" + v + "\n";
  std::string out(magic, 4);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  std::string bytes;
  bytes.reserve(payload.size() * 4);
  for (float f : payload) put_u32(bytes, std::bit_cast<std::uint32_t>(f));
  out += bytes;
  put_u32(out, crc32_of(bytes.data(), bytes.size()));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError(FormatError::Kind::io, "write failed for " + path);
}

struct Container {
  std::map<std::string, std::string> header;
  std::vector<float> payload;
};

inline const std::string& field(const std::map<std::string, std::string>& h, const std::string& key, const std::string& path) {
  auto it = h.find(key);
  if (it == h.end()) throw FormatError(FormatError::Kind::parse, path + ": header lacks '" + key + "'");
  return it->second;
}

inline long long field_int(const std::map<std::string, std::string>& h, const std::string& key, const std::string& path) {
  const auto& s = field(h, key, path);
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(FormatError::Kind::parse, path + ": bad integer for '" + key + "'");
  }
}

inline double field_double(const std::map<std::string, std::string>& h, const std::string& key, const std::string& path) {
  const auto& s = field(h, key, path);
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(FormatError::Kind::parse, path + ": bad number for '" + key + "'");
  }
}

/// Reads and validates a container; `payload_count(header)` gives the expected number of floats.
inline Container read_container(const std::string& path, const char (&magic)[5],
                                const std::function<std::size_t(const std::map<std::string, std::string>&)>& payload_count) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot open " + path);
  const std::string in{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (in.size() < 8) throw FormatError(FormatError::Kind::truncated, path + ": file too short");
  if (in.compare(0, 4, magic, 4) != 0) throw FormatError(FormatError::Kind::bad_magic, path + ": bad magic");
  const std::size_t hlen = get_u32(in, 4);
  if (in.size() < 8 + hlen) throw FormatError(FormatError::Kind::truncated, path + ": truncated header");

  Container c;
  std::istringstream lines(in.substr(8, hlen));
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(FormatError::Kind::parse, path + ": malformed header line");
    c.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (field_int(c.header, "format_version", path) != kFormatVersion)
    throw FormatError(FormatError::Kind::version, path + ": unsupported format version " + field(c.header, "format_version", path));

  const std::size_t n = payload_count(c.header);
  const std::size_t need = 8 + hlen + 4 * n + 4;
  if (in.size() < need) throw FormatError(FormatError::Kind::truncated, path + ": truncated payload");
  if (in.size() > need) throw FormatError(FormatError::Kind::dim_mismatch, path + ": payload longer than declared d");
  const char* payload = in.data() + 8 + hlen;
  if (crc32_of(payload, 4 * n) != get_u32(in, 8 + hlen + 4 * n))
    throw FormatError(FormatError::Kind::checksum, path + ": payload checksum mismatch");
  c.payload.resize(n);
  for (std::size_t i = 0; i < n; ++i) c.payload[i] = std::bit_cast<float>(get_u32(in, 8 + hlen + 4 * i));
  return c;
}

inline void put_model_header(Header& h, const DenoiserArch& arch, const ScheduleParams& s) {
  h.emplace_back("arch.input_dim", std::to_string(arch.input_dim));
  h.emplace_back("arch.hidden_dims", join_ints(arch.hidden_dims));
  h.emplace_back("arch.embed_dim", std::to_string(arch.embed_dim));
  h.emplace_back("arch.max_period", fmt_double(arch.max_period));
  h.emplace_back("arch.activation", to_string(arch.activation));
  h.emplace_back("schedule.kind", to_string(s.kind));
  h.emplace_back("schedule.T", std::to_string(s.T));
  h.emplace_back("schedule.beta_start", fmt_double(s.beta_start));
  h.emplace_back("schedule.beta_end", fmt_double(s.beta_end));
}

inline std::pair<DenoiserArch, ScheduleParams> get_model_header(const std::map<std::string, std::string>& h,
                                                                const std::string& path) {
  DenoiserArch arch;
  arch.input_dim = static_cast<int>(field_int(h, "arch.input_dim", path));
  arch.hidden_dims.clear();
  std::stringstream dims(field(h, "arch.hidden_dims", path));
  for (std::string item; std::getline(dims, item, ',');) {
    try {
      arch.hidden_dims.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw FormatError(FormatError::Kind::parse, path + ": bad arch.hidden_dims");
    }
  }
  arch.embed_dim = static_cast<int>(field_int(h, "arch.embed_dim", path));
  arch.max_period = field_double(h, "arch.max_period", path);
  try {
    arch.activation = activation_from_string(field(h, "arch.activation", path));
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::parse, path + ": " + e.what());
  }
  ScheduleParams s;
  try {
    s.kind = schedule_kind_from_string(field(h, "schedule.kind", path));
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::parse, path + ": " + e.what());
  }
  s.T = static_cast<int>(field_int(h, "schedule.T", path));
  s.beta_start = field_double(h, "schedule.beta_start", path);
  s.beta_end = field_double(h, "schedule.beta_end", path);
  return {arch, s};
}

inline std::size_t declared_d(const std::map<std::string, std::string>& h, const std::string& path) {
  const long long d = field_int(h, "d", path);
  if (d <= 0) throw FormatError(FormatError::Kind::parse, path + ": d must be positive");
  return static_cast<std::size_t>(d);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  if (c.params.size() != c.arch.num_params())
    throw ConfigError("checkpoint parameter count does not match its architecture");
  if (c.meta.dataset.find('\n') != std::string::npos) throw ConfigError("dataset tag may not contain newlines");
  detail::Header h;
  h.emplace_back("format_version", std::to_string(kFormatVersion));
  h.emplace_back("kind", "checkpoint");
  h.emplace_back("d", std::to_string(c.params.size()));
  detail::put_model_header(h, c.arch, c.schedule);
  h.emplace_back("train.seed", std::to_string(c.meta.seed));
  h.emplace_back("train.epoch", std::to_string(c.meta.epoch));
  h.emplace_back("train.dataset", c.meta.dataset);
  std::vector<float> payload(static_cast<std::size_t>(c.params.size()));
  for (Eigen::Index i = 0; i < c.params.size(); ++i) payload[static_cast<std::size_t>(i)] = static_cast<float>(c.params.values(i));
  detail::write_container(path, "VDU1", h, payload);
}

/// Loads a checkpoint; when `expected` is given its architecture must match exactly.
inline Checkpoint load_checkpoint(const std::string& path, const DenoiserArch* expected = nullptr) {
  auto c = detail::read_container(path, "VDU1", [&](const auto& h) { return detail::declared_d(h, path); });
  Checkpoint ck;
  std::tie(ck.arch, ck.schedule) = detail::get_model_header(c.header, path);
  if (expected && !(*expected == ck.arch))
    throw FormatError(FormatError::Kind::arch_mismatch, path + ": checkpoint architecture differs from the expected one");
  if (static_cast<Eigen::Index>(c.payload.size()) != ck.arch.num_params())
    throw FormatError(FormatError::Kind::dim_mismatch, path + ": declared d does not match the architecture");
  ck.meta.seed = static_cast<std::uint64_t>(std::stoull(detail::field(c.header, "train.seed", path)));
  ck.meta.epoch = static_cast<int>(detail::field_int(c.header, "train.epoch", path));
  ck.meta.dataset = detail::field(c.header, "train.dataset", path);
  ck.params.values.resize(static_cast<Eigen::Index>(c.payload.size()));
  for (std::size_t i = 0; i < c.payload.size(); ++i) ck.params.values(static_cast<Eigen::Index>(i)) = c.payload[i];
  return ck;
}

/// Per-coordinate sample mean and unbiased sample std over checkpoints, std floored at sigma_floor.
/// Without an explicit floor, 1e-4 times the RMS of mu_star is used.
inline ParamPosteriorStats estimate_posterior_stats(const std::vector<Checkpoint>& checkpoints,
                                                    std::optional<double> sigma_floor = std::nullopt,
                                                    StatsMode mode = StatsMode::multi_run) {
  if (checkpoints.size() < 2) throw ConfigError("posterior statistics need at least 2 checkpoints");
  const auto& first = checkpoints.front();
  const Eigen::Index d = first.params.size();
  for (const auto& c : checkpoints) {
    if (c.params.size() != d) throw ConfigError("checkpoints disagree on parameter count");
    if (!(c.arch == first.arch)) throw ConfigError("checkpoints disagree on architecture");
  }
  const double n = static_cast<double>(checkpoints.size());
  ParamPosteriorStats st;
  st.mu_star = Eigen::VectorXd::Zero(d);
  for (const auto& c : checkpoints) st.mu_star += c.params.values;
  st.mu_star /= n;
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(d);
  for (const auto& c : checkpoints) ss += (c.params.values - st.mu_star).cwiseAbs2();
  st.sigma_star = (ss / (n - 1.0)).cwiseSqrt();

  const double rms = d > 0 ? std::sqrt(st.mu_star.squaredNorm() / static_cast<double>(d)) : 0.0;
  st.sigma_floor = sigma_floor.value_or(1e-4 * rms);
  if (!(st.sigma_floor > 0.0)) throw ConfigError("sigma floor must be positive");
  st.sigma_star = st.sigma_star.cwiseMax(st.sigma_floor);
  st.n_checkpoints = static_cast<int>(checkpoints.size());
  st.mode = mode;
  st.arch = first.arch;
  st.schedule = first.schedule;
  return st;
}

inline void save_stats(const std::string& path, const ParamPosteriorStats& st) {
  if (st.mu_star.size() != st.sigma_star.size()) throw ConfigError("stats vectors differ in length");
  detail::Header h;
  h.emplace_back("format_version", std::to_string(kFormatVersion));
  h.emplace_back("kind", "stats");
  h.emplace_back("d", std::to_string(st.mu_star.size()));
  detail::put_model_header(h, st.arch, st.schedule);
  h.emplace_back("stats.mode", to_string(st.mode));
  h.emplace_back("stats.n_checkpoints", std::to_string(st.n_checkpoints));
  h.emplace_back("stats.sigma_floor", detail::fmt_double(st.sigma_floor));
  std::vector<float> payload;
  payload.reserve(static_cast<std::size_t>(2 * st.mu_star.size()));
  for (Eigen::Index i = 0; i < st.mu_star.size(); ++i) payload.push_back(static_cast<float>(st.mu_star(i)));
  for (Eigen::Index i = 0; i < st.sigma_star.size(); ++i) payload.push_back(static_cast<float>(st.sigma_star(i)));
  detail::write_container(path, "VDUS", h, payload);
}

inline ParamPosteriorStats load_stats(const std::string& path) {
  auto c = detail::read_container(path, "VDUS", [&](const auto& h) { return 2 * detail::declared_d(h, path); });
  ParamPosteriorStats st;
  std::tie(st.arch, st.schedule) = detail::get_model_header(c.header, path);
  const Eigen::Index d = static_cast<Eigen::Index>(c.payload.size() / 2);
  if (d != st.arch.num_params()) throw FormatError(FormatError::Kind::dim_mismatch, path + ": d does not match the architecture");
  try {
    st.mode = stats_mode_from_string(detail::field(c.header, "stats.mode", path));
  } catch (const ConfigError& e) {
    throw FormatError(FormatError::Kind::parse, path + ": " + e.what());
  }
  st.n_checkpoints = static_cast<int>(detail::field_int(c.header, "stats.n_checkpoints", path));
  st.sigma_floor = detail::field_double(c.header, "stats.sigma_floor", path);
  st.mu_star.resize(d);
  st.sigma_star.resize(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    st.mu_star(i) = c.payload[static_cast<std::size_t>(i)];
    st.sigma_star(i) = c.payload[static_cast<std::size_t>(d + i)];
  }
  return st;
}

/// Anything that trains for total_epochs() epochs and reports a checkpoint after each one.
template <class D>
concept TrainingDriver = requires(D& d, std::function<void(const Checkpoint&)> on_epoch) {
  { d.total_epochs() } -> std::convertible_to<int>;
  d.run(on_epoch);
};

/// Runs the driver once and keeps the last k checkpoints taken every spacing_epochs epochs,
/// counting back from the final epoch. Returned in increasing epoch order.
template <TrainingDriver D>
std::vector<Checkpoint> collect_single_run_checkpoints(D& driver, int k, int spacing_epochs) {
  if (k < 2) throw ConfigError("single-run collection needs k >= 2");
  if (spacing_epochs < 1) throw ConfigError("checkpoint spacing must be >= 1 epoch");
  const int total = driver.total_epochs();
  if (total < k * spacing_epochs)
    throw ConfigError("run of " + std::to_string(total) + " epochs is shorter than k * spacing = " +
                      std::to_string(k * spacing_epochs));
  const int first_kept = total - (k - 1) * spacing_epochs;
  std::vector<Checkpoint> kept;
  driver.run([&](const Checkpoint& c) {
    if (c.meta.epoch >= first_kept && (total - c.meta.epoch) % spacing_epochs == 0) kept.push_back(c);
  });
  if (static_cast<int>(kept.size()) != k) throw ConfigError("training driver did not report the expected epochs");
  return kept;
}

}  // namespace vdu
