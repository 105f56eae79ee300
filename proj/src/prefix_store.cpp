#include "pmerge/prefix_store.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <random>

#include "pmerge/binary_io.hpp"
#include "pmerge/error.hpp"

namespace pmerge {

ManualDesign ManualDesign::from_totals(std::size_t unique_total, std::size_t shared,
                                       std::size_t n_tasks) {
  if (n_tasks == 0) fail(ErrorKind::Design, "design needs at least one task");
  if (unique_total % n_tasks != 0) {
    fail(ErrorKind::Design, "Unq(" + std::to_string(unique_total) + ") does not split evenly over " +
                                std::to_string(n_tasks) + " tasks");
  }
  return {shared, unique_total / n_tasks, n_tasks};
}

void validate(const PrefixDesign& design) {
  std::visit(
      [](const auto& d) {
        using D = std::decay_t<decltype(d)>;
        if (d.n_tasks == 0) fail(ErrorKind::Design, "design needs at least one task");
        if constexpr (std::is_same_v<D, ManualDesign>) {
          if (d.total_rows() == 0) fail(ErrorKind::Design, "manual design has no rows");
        } else {
          if (d.init_len == 0) fail(ErrorKind::Design, "self-adaptive init_len must be positive");
          if (d.top_n == 0 || d.top_n > d.init_len) {
            fail(ErrorKind::Design, "self-adaptive top_n " + std::to_string(d.top_n) +
                                        " must be in [1, init_len=" + std::to_string(d.init_len) + "]");
          }
        }
      },
      design);
}

std::size_t total_rows(const PrefixDesign& design) {
  return std::visit([](const auto& d) { return d.total_rows(); }, design);
}

std::size_t task_count(const PrefixDesign& design) {
  return std::visit([](const auto& d) { return d.n_tasks; }, design);
}

std::string design_label(const PrefixDesign& design) {
  if (const auto* m = std::get_if<ManualDesign>(&design)) {
    const std::size_t unq = m->unique_len_per_task * m->n_tasks;
    if (unq == 0) return "Sha(" + std::to_string(m->shared_len) + ")";
    if (m->shared_len == 0) return "Unq(" + std::to_string(unq) + ")";
    return "Unq(" + std::to_string(unq) + ")+Sha(" + std::to_string(m->shared_len) + ")";
  }
  const auto& s = std::get<SelfAdaptiveDesign>(design);
  return "SelfAdaptive(" + std::to_string(s.init_len) + "," + std::to_string(s.top_n) + ")";
}

std::vector<std::size_t> indices_for_task(const ManualDesign& design, std::size_t task_id) {
  if (task_id >= design.n_tasks) {
    fail(ErrorKind::Index, "task " + std::to_string(task_id) + " out of range for " +
                               std::to_string(design.n_tasks) + " tasks");
  }
  std::vector<std::size_t> out(design.shared_len + design.unique_len_per_task);
  std::iota(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(design.shared_len), 0);
  std::iota(out.begin() + static_cast<std::ptrdiff_t>(design.shared_len), out.end(),
            design.shared_len + task_id * design.unique_len_per_task);
  return out;
}

// --- PrefixMatrix -----------------------------------------------------------

PrefixMatrix::PrefixMatrix(const PrefixDesign& design, const ModelConfig& model,
                           std::uint64_t seed, double init_std)
    : design_(design), n_layers_(model.n_layers), d_model_(model.d_model) {
  validate(design_);
  const std::size_t n = total_rows(design_);
  const std::size_t width = model.prefix_row_dim();
  std::vector<double> v(n * width);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, init_std);
  for (auto& x : v) x = dist(rng);
  rows_ = Tensor::from({n, width}, std::move(v), true);

  std::vector<std::vector<std::size_t>> maps;
  if (const auto* m = std::get_if<ManualDesign>(&design_)) {
    for (std::size_t t = 0; t < m->n_tasks; ++t) maps.push_back(indices_for_task(*m, t));
  } else {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    maps.assign(task_count(design_), all);
  }
  set_task_maps(std::move(maps));
}

PrefixMatrix::PrefixMatrix(const PrefixMatrix& other)
    : design_(other.design_),
      n_layers_(other.n_layers_),
      d_model_(other.d_model_),
      rows_(other.rows_.defined() ? other.rows_.detach_copy(other.rows_.requires_grad()) : Tensor{}),
      maps_(other.maps_),
      active_(other.active_) {}

PrefixMatrix& PrefixMatrix::operator=(const PrefixMatrix& other) {
  if (this != &other) *this = PrefixMatrix(other);
  return *this;
}

const std::vector<std::size_t>& PrefixMatrix::task_map(std::size_t task_id) const {
  if (task_id >= maps_.size()) {
    fail(ErrorKind::Index, "task " + std::to_string(task_id) + " out of range for " +
                               std::to_string(maps_.size()) + " task maps");
  }
  return maps_[task_id];
}

std::size_t PrefixMatrix::active_count() const {
  return static_cast<std::size_t>(std::count(active_.begin(), active_.end(), 1));
}

void PrefixMatrix::set_task_maps(std::vector<std::vector<std::size_t>> maps) {
  if (maps.size() != task_count(design_)) {
    fail(ErrorKind::Design, "expected " + std::to_string(task_count(design_)) + " task maps, got " +
                                std::to_string(maps.size()));
  }
  std::vector<std::uint8_t> active(rows(), 0);
  for (const auto& map : maps) {
    for (auto r : map) {
      if (r >= rows()) {
        fail(ErrorKind::Index, "task map row " + std::to_string(r) + " >= " + std::to_string(rows()));
      }
      active[r] = 1;
    }
  }
  maps_ = std::move(maps);
  active_ = std::move(active);
}

void PrefixMatrix::check_compatible(const ModelConfig& model) const {
  if (model.n_layers != n_layers_ || model.d_model != d_model_) {
    fail(ErrorKind::Compatibility,
         "prefix built for n_layers=" + std::to_string(n_layers_) + ", d_model=" +
             std::to_string(d_model_) + " but model has n_layers=" + std::to_string(model.n_layers) +
             ", d_model=" + std::to_string(model.d_model));
  }
}

std::string PrefixMatrix::checksum() const {
  Sha256 h;
  h.update(rows_.data());
  return h.hex_digest();
}

bool PrefixMatrix::operator==(const PrefixMatrix& other) const {
  const auto a = rows_.data();
  const auto b = other.rows_.data();
  return design_ == other.design_ && n_layers_ == other.n_layers_ &&
         d_model_ == other.d_model_ && rows_.shape() == other.rows_.shape() &&
         std::equal(a.begin(), a.end(), b.begin(), b.end(),
                    [](double x, double y) { return std::bit_cast<std::uint64_t>(x) ==
                                                    std::bit_cast<std::uint64_t>(y); }) &&
         maps_ == other.maps_ && active_ == other.active_;
}

namespace {

constexpr int kPrefixFormatVersion = 1;

nlohmann::json design_to_json(const PrefixDesign& design) {
  if (const auto* m = std::get_if<ManualDesign>(&design)) {
    return {{"kind", "manual"},
            {"shared_len", m->shared_len},
            {"unique_len_per_task", m->unique_len_per_task},
            {"n_tasks", m->n_tasks}};
  }
  const auto& s = std::get<SelfAdaptiveDesign>(design);
  return {{"kind", "self_adaptive"}, {"init_len", s.init_len}, {"top_n", s.top_n},
          {"n_tasks", s.n_tasks}};
}

PrefixDesign design_from_json(const nlohmann::json& j) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "manual") {
    return ManualDesign{j.at("shared_len").get<std::size_t>(),
                        j.at("unique_len_per_task").get<std::size_t>(),
                        j.at("n_tasks").get<std::size_t>()};
  }
  if (kind == "self_adaptive") {
    return SelfAdaptiveDesign{j.at("init_len").get<std::size_t>(), j.at("top_n").get<std::size_t>(),
                              j.at("n_tasks").get<std::size_t>()};
  }
  fail(ErrorKind::Load, "unknown prefix design kind '" + kind + "'");
}

}  // namespace

void PrefixMatrix::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["format"] = "pmerge-prefix";
  header["version"] = kPrefixFormatVersion;
  header["design"] = design_to_json(design_);
  header["task_index_maps"] = maps_;
  header["active_mask"] = active_;
  header["dims"] = {{"rows", rows()}, {"row_dim", row_dim()}, {"n_layers", n_layers_},
                    {"d_model", d_model_}};
  write_container(path, header, rows_.data());
}

PrefixMatrix PrefixMatrix::load(const std::filesystem::path& path) {
  Container c = read_container(path);
  try {
    const auto& h = c.header;
    if (h.at("format") != "pmerge-prefix") {
      fail(ErrorKind::Load, path.string() + ": not a prefix checkpoint");
    }
    if (h.at("version").get<int>() != kPrefixFormatVersion) {
      fail(ErrorKind::Load, path.string() + ": unsupported prefix checkpoint version " +
                                h.at("version").dump());
    }
    PrefixMatrix p;
    p.design_ = design_from_json(h.at("design"));
    validate(p.design_);
    const auto& dims = h.at("dims");
    const auto n = dims.at("rows").get<std::size_t>();
    const auto width = dims.at("row_dim").get<std::size_t>();
    p.n_layers_ = dims.at("n_layers").get<std::size_t>();
    p.d_model_ = dims.at("d_model").get<std::size_t>();
    if (n != total_rows(p.design_) || width != p.n_layers_ * kNumSites * 2 * p.d_model_ ||
        c.payload.size() != n * width) {
      fail(ErrorKind::Load, path.string() + ": dims disagree with design or payload");
    }
    p.rows_ = Tensor::from({n, width}, std::move(c.payload), true);
    auto maps = h.at("task_index_maps").get<std::vector<std::vector<std::size_t>>>();
    auto mask = h.at("active_mask").get<std::vector<std::uint8_t>>();
    p.set_task_maps(std::move(maps));
    if (mask != p.active_) {
      fail(ErrorKind::Load, path.string() + ": active mask inconsistent with task maps");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Load, path.string() + ": malformed header: " + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Load) throw;
    fail(ErrorKind::Load, path.string() + ": " + e.what());
  }
}

// --- operations -------------------------------------------------------------

PrefixActivations gather(const PrefixMatrix& prefix, std::span<const std::size_t> indices) {
  if (indices.empty()) return {};
  for (auto r : indices) {
    if (r >= prefix.rows()) {
      fail(ErrorKind::Index, "prefix row " + std::to_string(r) + " >= " +
                                 std::to_string(prefix.rows()));
    }
    if (!prefix.is_active(r)) {
      fail(ErrorKind::MaskViolation, "prefix row " + std::to_string(r) + " is masked");
    }
  }
  ModelConfig shape;
  shape.n_layers = prefix.n_layers();
  shape.d_model = prefix.d_model();
  return PrefixActivations::from_rows(embedding(prefix.tensor(), indices), shape);
}

void apply_selection(PrefixMatrix& prefix, std::span<const FisherReport> reports,
                     std::size_t top_n) {
  const std::size_t n_tasks = task_count(prefix.design());
  if (const auto* s = std::get_if<SelfAdaptiveDesign>(&prefix.design())) {
    if (top_n > s->init_len) {
      fail(ErrorKind::Design, "top_n " + std::to_string(top_n) + " exceeds init_len " +
                                  std::to_string(s->init_len));
    }
  }
  if (top_n == 0 || top_n > prefix.rows()) {
    fail(ErrorKind::Design, "top_n " + std::to_string(top_n) + " must be in [1, " +
                                std::to_string(prefix.rows()) + "]");
  }
  if (reports.size() != n_tasks) {
    fail(ErrorKind::Contract, "need one Fisher report per task (" + std::to_string(n_tasks) +
                                  "), got " + std::to_string(reports.size()));
  }
  std::vector<std::vector<std::size_t>> maps(n_tasks);
  std::vector<bool> seen(n_tasks, false);
  for (const auto& report : reports) {
    if (report.task_id >= n_tasks || seen[report.task_id]) {
      fail(ErrorKind::Contract, "Fisher reports must cover each task exactly once");
    }
    if (report.scores.size() != prefix.rows()) {
      fail(ErrorKind::Dimension, "Fisher report has " + std::to_string(report.scores.size()) +
                                     " scores for " + std::to_string(prefix.rows()) + " rows");
    }
    seen[report.task_id] = true;
    std::vector<std::size_t> order(prefix.rows());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return report.scores[a] > report.scores[b];
    });
    order.resize(top_n);
    maps[report.task_id] = std::move(order);
  }
  prefix.set_task_maps(std::move(maps));
}

std::vector<std::size_t> merge_for_target(const PrefixMatrix& prefix) {
  std::vector<std::size_t> out;
  if (std::holds_alternative<ManualDesign>(prefix.design())) {
    out.resize(prefix.rows());
    std::iota(out.begin(), out.end(), 0);
    return out;
  }
  for (std::size_t r = 0; r < prefix.rows(); ++r) {
    bool used = false;
    for (const auto& map : prefix.task_maps())
      used = used || std::find(map.begin(), map.end(), r) != map.end();
    if (used) out.push_back(r);
  }
  return out;
}

namespace {

std::vector<std::size_t> usage_counts(const PrefixMatrix& prefix, std::vector<std::size_t>* owner) {
  std::vector<std::size_t> counts(prefix.rows(), 0);
  if (owner) owner->assign(prefix.rows(), 0);
  for (std::size_t t = 0; t < prefix.task_maps().size(); ++t) {
    for (auto r : prefix.task_maps()[t]) {
      ++counts[r];
      if (owner) (*owner)[r] = t;
    }
  }
  return counts;
}

}  // namespace

SharingSummary sharing_summary(const PrefixMatrix& prefix) {
  SharingSummary s;
  for (auto c : usage_counts(prefix, nullptr)) {
    if (c == 0) ++s.inactive;
    else if (c == 1) ++s.unique;
    else ++s.shared;
  }
  return s;
}

std::string region_label(const PrefixMatrix& prefix, std::size_t row) {
  std::vector<std::size_t> owner;
  const auto counts = usage_counts(prefix, &owner);
  if (row >= counts.size()) fail(ErrorKind::Index, "row " + std::to_string(row) + " out of range");
  if (counts[row] == 0) return "inactive";
  if (counts[row] > 1 || prefix.task_maps().size() == 1) return "shared";
  return "unique(" + std::to_string(owner[row]) + ")";
}

}  // namespace pmerge
