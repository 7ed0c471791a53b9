// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dalg/model.hpp"
#include "dalg/synthetic.hpp"

namespace dalg {

/// Unit-norm descriptors with their image ids (double precision, in memory).
struct Descriptors {
    std::vector<std::string> ids;
    Tensor rows;  // N x C

    std::int64_t count() const { return rows.size() == 0 ? 0 : rows.extent(0); }
    std::int64_t dim() const { return rows.size() == 0 ? 0 : rows.extent(1); }
};

/// Persisted gallery; descriptors are stored as f32 rows, normalized.
class GalleryIndex {
public:
    static GalleryIndex build(const Descriptors& d);
    void save(const std::string& path) const;
    static GalleryIndex load(const std::string& path);

    std::int64_t size() const { return static_cast<std::int64_t>(ids_.size()); }
    std::int64_t dim() const { return dim_; }
    const std::vector<std::string>& ids() const { return ids_; }
    const float* row(std::int64_t n) const { return data_.data() + n * dim_; }
    std::vector<double> row_as_double(std::int64_t n) const;

private:
    std::vector<std::string> ids_;
    std::int64_t dim_ = 0;
    std::vector<float> data_;
};

inline constexpr std::uint32_t kIndexVersion = 1;

struct SearchHit {
    std::string id;
    double score;
};

/// Exact cosine top-k: scores descending, ties broken by ascending id.
std::vector<SearchHit> search(const GalleryIndex& index, const double* query, std::int64_t k);

// ---- ground truth and metrics ------------------------------------------------

struct QueryGt {
    std::vector<std::string> easy, hard, junk;
};
using GroundTruth = std::map<std::string, QueryGt>;

/// Medium counts easy+hard images as positives; Hard counts only hard ones and
/// demotes easy to junk. Flat ground truth ({positive, junk}) is stored in
/// `easy` and evaluated with the Medium mapping.
enum class Protocol { kMedium, kHard };
std::string to_string(Protocol p);
Protocol protocol_from(const std::string& s);

struct ApResult {
    double ap = 0.0;
    bool counted = false;  // false when the query has no positives (skipped)
};

/// Junk ids are removed from the ranking before truncation to k;
/// AP@k = sum of precision@hit / min(|positives|, k).
ApResult average_precision_at_k(const std::vector<std::string>& ranked,
                                const std::set<std::string>& positives,
                                const std::set<std::string>& junk, std::int64_t k);

/// Fraction of the junk-filtered top k that is positive (denominator k).
double precision_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& positives,
                      const std::set<std::string>& junk, std::int64_t k);

struct PerQueryResult {
    std::string id;
    double ap = 0.0;
    bool counted = false;
};

struct EvalReport {
    std::string protocol;
    std::int64_t k = 100;
    double map = 0.0;
    std::map<std::int64_t, double> mp;  // K -> mP@K
    std::optional<double> gap;
    std::vector<PerQueryResult> per_query;
    std::int64_t counted = 0;
    std::int64_t skipped = 0;
};

struct GapPrediction {
    std::string query_id;
    std::int64_t label = 0;
    double confidence = 0.0;
};

/// Global average precision over single per-query predictions, sorted by
/// confidence descending (ties by ascending query id). The mean runs over the
/// queries that possess a ground-truth label.
double gap(std::vector<GapPrediction> predictions, const std::map<std::string, std::int64_t>& gt_labels);

/// Ranks every query against the index and aggregates mAP@k, mP@K and, when
/// labels are supplied, GAP from top-1 predictions.
EvalReport evaluate(const GalleryIndex& index, const Descriptors& queries, const GroundTruth& gt,
                    Protocol protocol, std::int64_t k, const std::vector<std::int64_t>& mp_ks,
                    const std::map<std::string, std::int64_t>* query_labels = nullptr,
                    const std::map<std::string, std::int64_t>* gallery_labels = nullptr);

/// Same-class gallery images are the positives of each query; junk is empty.
GroundTruth class_ground_truth(const std::vector<Sample>& queries, const std::vector<Sample>& gallery);

// ---- extraction ----------------------------------------------------------------

/// One forward pass per image (batched); asserts the model's forward counter
/// advanced by exactly the number of images.
Descriptors extract_descriptors(DalgModel& model, const SyntheticSpec& spec,
                                const std::vector<Sample>& samples, std::int64_t batch_size = 16);

}  // namespace dalg
