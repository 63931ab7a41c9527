#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "fcbgan/harness/harness.hpp"

namespace fcbgan {

namespace {

const std::set<std::string> kNetKeys = {"block_kind", "g_channels", "d_channels", "depth", "latent_dim", "seed"};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("config: " + key + " = '" + v + "' is not an integer");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) {
    throw std::invalid_argument("config: " + key + " = '" + v + "' is not a finite number");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("config: " + key + " = '" + v + "' is not a boolean");
}

std::string fmt(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string trajectory_text(const RunConfig& c) {
  std::ostringstream os;
  os << c.net.to_text() << "loss = " << to_string(c.loss.kind) << "\n"
     << "gamma = " << fmt(c.loss.gamma) << "\n"
     << "lazy_interval = " << c.loss.lazy_interval << "\n"
     << "lr = " << fmt(c.adam.lr) << "\n"
     << "beta1 = " << fmt(c.adam.beta1) << "\n"
     << "beta2 = " << fmt(c.adam.beta2) << "\n"
     << "adam_eps = " << fmt(c.adam.eps) << "\n"
     << "n_dis = " << c.n_dis << "\n"
     << "batch_d = " << c.batch_d << "\n"
     << "batch_g = " << c.batch_g << "\n"
     << "data = " << c.data << "\n";
  return os.str();
}

}  // namespace

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void RunConfig::validate() const {
  net.validate();
  loss.validate();
  auto positive = [](const char* key, double v) {
    if (!(v > 0)) throw std::invalid_argument(std::string("config: ") + key + " must be positive");
  };
  positive("lr", adam.lr);
  positive("adam_eps", adam.eps);
  if (adam.beta1 < 0 || adam.beta1 >= 1) throw std::invalid_argument("config: beta1 must be in [0, 1)");
  if (adam.beta2 < 0 || adam.beta2 >= 1) throw std::invalid_argument("config: beta2 must be in [0, 1)");
  positive("n_dis", n_dis);
  positive("batch_d", static_cast<double>(batch_d));
  positive("batch_g", static_cast<double>(batch_g));
  positive("total_g_iters", static_cast<double>(total_g_iters));
  if (eval_every < 0) throw std::invalid_argument("config: eval_every must be >= 0");
  if (eval_n < 2) throw std::invalid_argument("config: eval_n must be >= 2");
  if (pr_k < 1 || pr_k >= eval_n) throw std::invalid_argument("config: pr_k must be in [1, eval_n)");
  if (data.empty()) throw std::invalid_argument("config: data must be set");
  if (net.resolution() != kImageSide) {
    throw std::invalid_argument("config: depth " + std::to_string(net.depth) + " gives " +
                                std::to_string(net.resolution()) + "px images; datasets are 32x32 (depth = 3)");
  }
  make_embedder(embedder);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << trajectory_text(*this) << "total_g_iters = " << total_g_iters << "\n"
     << "eval_every = " << eval_every << "\n"
     << "eval_at_start = " << (eval_at_start ? "true" : "false") << "\n"
     << "eval_n = " << eval_n << "\n"
     << "embedder = " << embedder << "\n"
     << "pr_k = " << pr_k << "\n"
     << "determinism = " << (determinism ? "true" : "false") << "\n"
     << "out_dir = " << out_dir << "\n";
  return os.str();
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  std::set<std::string> seen;
  std::string net_text;
  bool have_batch_g = false;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq)), v = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw std::invalid_argument("config: key '" + key + "' given twice");
    if (kNetKeys.count(key)) {
      net_text += key + " = " + v + "\n";
    } else if (key == "loss") {
      c.loss.kind = parse_loss_kind(v);
    } else if (key == "gamma") {
      c.loss.gamma = to_double(key, v);
    } else if (key == "lazy_interval") {
      c.loss.lazy_interval = to_int(key, v);
    } else if (key == "lr") {
      c.adam.lr = to_double(key, v);
    } else if (key == "beta1") {
      c.adam.beta1 = to_double(key, v);
    } else if (key == "beta2") {
      c.adam.beta2 = to_double(key, v);
    } else if (key == "adam_eps") {
      c.adam.eps = to_double(key, v);
    } else if (key == "n_dis") {
      c.n_dis = static_cast<int>(to_int(key, v));
    } else if (key == "batch_d") {
      c.batch_d = to_int(key, v);
    } else if (key == "batch_g") {
      c.batch_g = to_int(key, v);
      have_batch_g = true;
    } else if (key == "total_g_iters") {
      c.total_g_iters = to_int(key, v);
    } else if (key == "eval_every") {
      c.eval_every = to_int(key, v);
    } else if (key == "eval_at_start") {
      c.eval_at_start = to_bool(key, v);
    } else if (key == "eval_n") {
      c.eval_n = to_int(key, v);
    } else if (key == "embedder") {
      c.embedder = v;
    } else if (key == "pr_k") {
      c.pr_k = static_cast<int>(to_int(key, v));
    } else if (key == "determinism") {
      c.determinism = to_bool(key, v);
    } else if (key == "data") {
      c.data = v;
    } else if (key == "out_dir") {
      c.out_dir = v;
    } else {
      throw std::invalid_argument("config: unknown key '" + key + "'");
    }
  }
  c.net = NetworkSpec::from_text(net_text);
  if (!have_batch_g) c.batch_g = 2 * c.batch_d;
  c.validate();
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) { return from_text(read_file(path)); }

std::uint64_t RunConfig::trajectory_hash() const { return fnv1a(trajectory_text(*this)); }

}  // namespace fcbgan
