#include "masv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace masv {
namespace eval {

std::vector<double> TrialSet::scores() const {
  std::vector<double> s;
  s.reserve(trials.size());
  for (const auto& t : trials) s.push_back(t.score);
  return s;
}

std::vector<int> TrialSet::labels() const {
  std::vector<int> l;
  l.reserve(trials.size());
  for (const auto& t : trials) l.push_back(t.label);
  return l;
}

namespace {

void check_labels(const std::vector<double>& scores, const std::vector<int>& labels,
                  int64_t* n_t, int64_t* n_n) {
  MASV_CHECK(scores.size() == labels.size(), DimensionError, "metrics: ", scores.size(),
             " scores vs ", labels.size(), " labels");
  int64_t nt = 0, nn = 0;
  for (int l : labels) (l ? nt : nn) += 1;
  MASV_CHECK(nt >= 1 && nn >= 1, ContractError,
             "metrics need at least one target and one nontarget trial, got ", nt, "/", nn);
  *n_t = nt;
  *n_n = nn;
}

// Operating point with exact counts; ratios are derived views. Counts keep
// the hull geometry in integer arithmetic.
struct OpPoint {
  int64_t fa, miss, n_n, n_t;
  double thr;
  double far() const { return static_cast<double>(fa) / n_n; }
  double frr() const { return static_cast<double>(miss) / n_t; }
};

// Sweep thresholds over unique score values (plus reject-all); FAR is
// non-increasing, FRR non-decreasing along the sweep.
std::vector<OpPoint> sweep(const std::vector<double>& scores, const std::vector<int>& labels,
                           int64_t n_t, int64_t n_n) {
  std::vector<std::pair<double, int>> sl(scores.size());
  for (size_t i = 0; i < scores.size(); ++i) sl[i] = {scores[i], labels[i]};
  std::sort(sl.begin(), sl.end());
  std::vector<OpPoint> pts;
  pts.reserve(sl.size() + 2);
  // theta at the lowest score accepts everything
  int64_t miss = 0, fa = n_n;
  size_t i = 0;
  while (i < sl.size()) {
    const double thr = sl[i].first;
    pts.push_back({fa, miss, n_n, n_t, thr});
    // advance theta past this score value: targets below it are missed,
    // nontargets below it stop being false accepts
    while (i < sl.size() && sl[i].first == thr) {
      if (sl[i].second)
        ++miss;
      else
        --fa;
      ++i;
    }
  }
  pts.push_back({0, n_t, n_n, n_t, std::numeric_limits<double>::infinity()});  // reject all
  return pts;
}

// Lower convex hull over FAR (monotone chain in exact integer cross
// products); the ROC convex hull.
std::vector<OpPoint> rocch(std::vector<OpPoint> pts) {
  std::sort(pts.begin(), pts.end(), [](const OpPoint& a, const OpPoint& b) {
    return a.fa < b.fa || (a.fa == b.fa && a.miss < b.miss);
  });
  std::vector<OpPoint> hull;
  for (const auto& p : pts) {
    while (hull.size() >= 2) {
      const OpPoint& a = hull[hull.size() - 2];
      const OpPoint& b = hull[hull.size() - 1];
      const int64_t cross =
          (b.fa - a.fa) * (p.miss - a.miss) - (b.miss - a.miss) * (p.fa - a.fa);
      if (cross <= 0)
        hull.pop_back();
      else
        break;
    }
    if (!hull.empty() && hull.back().fa == p.fa) {
      if (p.miss < hull.back().miss) hull.back() = p;
      continue;
    }
    hull.push_back(p);
  }
  return hull;
}

}  // namespace

std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
  int64_t n_t = 0, n_n = 0;
  check_labels(scores, labels, &n_t, &n_n);
  auto pts = sweep(scores, labels, n_t, n_n);
  std::vector<RocPoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({p.far(), p.frr()});
  return out;
}

double compute_eer(const std::vector<double>& scores, const std::vector<int>& labels,
                   double* threshold_at_eer) {
  int64_t n_t = 0, n_n = 0;
  check_labels(scores, labels, &n_t, &n_n);
  auto hull = rocch(sweep(scores, labels, n_t, n_n));
  // walk hull by ascending FAR; frr-far goes from >=0 at FAR=0 to <=0 at FAR=1
  for (size_t i = 0; i < hull.size(); ++i) {
    const double d = hull[i].frr() - hull[i].far();
    if (d == 0.0) {
      if (threshold_at_eer) *threshold_at_eer = hull[i].thr;
      return hull[i].far();
    }
    if (i + 1 == hull.size()) break;
    const double d2 = hull[i + 1].frr() - hull[i + 1].far();
    if ((d > 0.0 && d2 < 0.0) || (d < 0.0 && d2 > 0.0)) {
      const double lambda = d / (d - d2);
      if (threshold_at_eer)
        *threshold_at_eer = hull[i].thr + lambda * (hull[i + 1].thr - hull[i].thr);
      return hull[i].far() + lambda * (hull[i + 1].far() - hull[i].far());
    }
  }
  // degenerate hull (single point); report its FAR
  if (threshold_at_eer) *threshold_at_eer = hull.front().thr;
  return hull.front().far();
}

double compute_min_dcf(const std::vector<double>& scores, const std::vector<int>& labels,
                       const DcfConfig& cfg) {
  cfg.validate();
  int64_t n_t = 0, n_n = 0;
  check_labels(scores, labels, &n_t, &n_n);
  auto pts = sweep(scores, labels, n_t, n_n);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : pts) {
    const double dcf =
        cfg.c_miss * cfg.p_target * p.frr() + cfg.c_fa * (1.0 - cfg.p_target) * p.far();
    best = std::min(best, dcf);
  }
  return best / std::min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1.0 - cfg.p_target));
}

namespace {
template <typename S>
double cosine_impl(S a, S b) {
  MASV_CHECK(a.size() == b.size() && !a.empty(), DimensionError,
             "cosine_score: embedding sizes ", a.size(), " vs ", b.size());
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}
}  // namespace

double cosine_score(std::span<const float> a, std::span<const float> b) {
  return cosine_impl(a, b);
}
double cosine_score(std::span<const double> a, std::span<const double> b) {
  return cosine_impl(a, b);
}

TrialSet read_trial_list(const std::string& path) {
  std::ifstream fs(path);
  MASV_CHECK(fs.good(), IoError, "cannot open trial list: ", path);
  TrialSet set;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(fs, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    Trial t;
    std::string label;
    MASV_CHECK(static_cast<bool>(ss >> label >> t.enroll >> t.test), ParseError, path, ":",
               lineno, ": expected `label enroll test`");
    MASV_CHECK(label == "0" || label == "1", ParseError, path, ":", lineno,
               ": label must be 0 or 1, got `", label, "`");
    t.label = label == "1" ? 1 : 0;
    ss >> t.score;  // optional
    set.trials.push_back(std::move(t));
  }
  return set;
}

void write_scored_trials(const std::string& path, const TrialSet& set) {
  std::ofstream fs(path);
  MASV_CHECK(fs.good(), IoError, "cannot write scored trials: ", path);
  fs.precision(17);
  for (const auto& t : set.trials)
    fs << t.label << " " << t.enroll << " " << t.test << " " << t.score << "\n";
  MASV_CHECK(fs.good(), IoError, "short write to ", path);
}

}  // namespace eval
}  // namespace masv
