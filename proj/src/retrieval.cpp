// SPDX-License-Identifier: Apache-2.0

#include "dalg/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little, "index io assumes a little-endian host");

namespace dalg {

namespace {

constexpr char kMagic[4] = {'D', 'I', 'D', 'X'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("index truncated while reading " + what);
    return v;
}

}  // namespace

GalleryIndex GalleryIndex::build(const Descriptors& d) {
    if (d.count() < 1) throw Error("index build: need at least one descriptor");
    std::set<std::string> seen;
    for (const auto& id : d.ids) {
        if (!seen.insert(id).second) throw Error("index build: duplicate id " + id);
    }
    if (static_cast<std::int64_t>(d.ids.size()) != d.count()) {
        throw ShapeError("index build: " + std::to_string(d.ids.size()) + " ids for " +
                         std::to_string(d.count()) + " rows");
    }
    GalleryIndex idx;
    idx.ids_ = d.ids;
    idx.dim_ = d.dim();
    idx.data_.resize(static_cast<std::size_t>(d.count() * d.dim()));
    for (std::int64_t n = 0; n < d.count(); ++n) {
        double norm2 = 0.0;
        for (std::int64_t c = 0; c < idx.dim_; ++c) {
            const double v = d.rows[n * idx.dim_ + c];
            norm2 += v * v;
        }
        if (norm2 == 0.0) throw NumericError("index build: zero-norm descriptor " + d.ids[static_cast<std::size_t>(n)]);
        const double inv = 1.0 / std::sqrt(norm2);
        for (std::int64_t c = 0; c < idx.dim_; ++c) {
            idx.data_[static_cast<std::size_t>(n * idx.dim_ + c)] =
                static_cast<float>(d.rows[n * idx.dim_ + c] * inv);
        }
    }
    return idx;
}

std::vector<double> GalleryIndex::row_as_double(std::int64_t n) const {
    std::vector<double> out(static_cast<std::size_t>(dim_));
    for (std::int64_t c = 0; c < dim_; ++c) out[static_cast<std::size_t>(c)] = row(n)[c];
    return out;
}

void GalleryIndex::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open index for writing: " + path);
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kIndexVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(dim_));
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(ids_.size()));
    for (std::size_t n = 0; n < ids_.size(); ++n) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(ids_[n].size()));
        os.write(ids_[n].data(), static_cast<std::streamsize>(ids_[n].size()));
        os.write(reinterpret_cast<const char*>(data_.data() + static_cast<std::int64_t>(n) * dim_),
                 static_cast<std::streamsize>(dim_ * static_cast<std::int64_t>(sizeof(float))));
    }
    if (!os) throw IoError("write failure on index: " + path);
}

GalleryIndex GalleryIndex::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open index: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("bad index magic in " + path + " (expected \"DIDX\")");
    }
    const auto version = read_pod<std::uint32_t>(is, "version");
    if (version != kIndexVersion) {
        throw IoError("unsupported index version " + std::to_string(version) + " (expected " +
                      std::to_string(kIndexVersion) + ")");
    }
    GalleryIndex idx;
    idx.dim_ = static_cast<std::int64_t>(read_pod<std::uint32_t>(is, "dim"));
    const auto n = static_cast<std::int64_t>(read_pod<std::uint64_t>(is, "count"));
    if (idx.dim_ < 1 || n < 1) throw IoError("index holds no descriptors: " + path);
    idx.data_.resize(static_cast<std::size_t>(n * idx.dim_));
    std::set<std::string> seen;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto len = read_pod<std::uint16_t>(is, "id length");
        std::string id(len, '\0');
        is.read(id.data(), len);
        if (!is) throw IoError("index truncated while reading id");
        if (!seen.insert(id).second) throw IoError("index holds duplicate id " + id);
        idx.ids_.push_back(std::move(id));
        is.read(reinterpret_cast<char*>(idx.data_.data() + i * idx.dim_),
                static_cast<std::streamsize>(idx.dim_ * static_cast<std::int64_t>(sizeof(float))));
        if (!is) throw IoError("index truncated while reading descriptors");
        double norm2 = 0.0;
        for (std::int64_t c = 0; c < idx.dim_; ++c) {
            const double v = idx.data_[static_cast<std::size_t>(i * idx.dim_ + c)];
            norm2 += v * v;
        }
        if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6) {
            throw IoError("index row " + idx.ids_.back() + " is not unit norm");
        }
    }
    return idx;
}

std::vector<SearchHit> search(const GalleryIndex& index, const double* query, std::int64_t k) {
    if (k < 1) throw Error("search: k must be >= 1");
    if (index.size() < 1) throw Error("search: empty index");
    const std::int64_t n = index.size(), dim = index.dim();
    std::vector<SearchHit> hits;
    hits.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const float* row = index.row(i);
        double s = 0.0;
        for (std::int64_t c = 0; c < dim; ++c) s += query[c] * static_cast<double>(row[c]);
        hits.push_back({index.ids()[static_cast<std::size_t>(i)], s});
    }
    std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    if (static_cast<std::int64_t>(hits.size()) > k) hits.resize(static_cast<std::size_t>(k));
    return hits;
}

std::string to_string(Protocol p) { return p == Protocol::kMedium ? "medium" : "hard"; }

Protocol protocol_from(const std::string& s) {
    if (s == "medium" || s == "flat") return Protocol::kMedium;
    if (s == "hard") return Protocol::kHard;
    throw SchemaError("unknown protocol: " + s);
}

ApResult average_precision_at_k(const std::vector<std::string>& ranked,
                                const std::set<std::string>& positives,
                                const std::set<std::string>& junk, std::int64_t k) {
    if (k < 1) throw Error("average_precision_at_k: k must be >= 1");
    if (positives.empty()) return {0.0, false};
    double ap = 0.0;
    std::int64_t rank = 0, hits = 0;
    for (const auto& id : ranked) {
        if (junk.count(id)) continue;
        ++rank;
        if (rank > k) break;
        if (positives.count(id)) {
            ++hits;
            ap += static_cast<double>(hits) / static_cast<double>(rank);
        }
    }
    const auto denom = std::min<std::int64_t>(static_cast<std::int64_t>(positives.size()), k);
    return {ap / static_cast<double>(denom), true};
}

double precision_at_k(const std::vector<std::string>& ranked, const std::set<std::string>& positives,
                      const std::set<std::string>& junk, std::int64_t k) {
    if (k < 1) throw Error("precision_at_k: k must be >= 1");
    std::int64_t rank = 0, hits = 0;
    for (const auto& id : ranked) {
        if (junk.count(id)) continue;
        ++rank;
        if (rank > k) break;
        if (positives.count(id)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(k);
}

double gap(std::vector<GapPrediction> predictions, const std::map<std::string, std::int64_t>& gt_labels) {
    std::set<std::string> seen;
    for (const auto& p : predictions) {
        if (!seen.insert(p.query_id).second) {
            throw Error("gap: duplicate prediction for query " + p.query_id);
        }
    }
    const auto labeled = static_cast<std::int64_t>(gt_labels.size());
    if (labeled == 0) throw Error("gap: no labeled queries");
    std::sort(predictions.begin(), predictions.end(), [](const GapPrediction& a, const GapPrediction& b) {
        if (a.confidence != b.confidence) return a.confidence > b.confidence;
        return a.query_id < b.query_id;
    });
    double acc = 0.0;
    std::int64_t correct = 0, rank = 0;
    for (const auto& p : predictions) {
        ++rank;
        auto it = gt_labels.find(p.query_id);
        const bool rel = it != gt_labels.end() && it->second == p.label;
        if (rel) {
            ++correct;
            acc += static_cast<double>(correct) / static_cast<double>(rank);
        }
    }
    return acc / static_cast<double>(labeled);
}

namespace {

void protocol_sets(const QueryGt& g, Protocol p, std::set<std::string>& positives,
                   std::set<std::string>& junk) {
    positives.clear();
    junk.clear();
    if (p == Protocol::kMedium) {
        positives.insert(g.easy.begin(), g.easy.end());
        positives.insert(g.hard.begin(), g.hard.end());
        junk.insert(g.junk.begin(), g.junk.end());
    } else {
        positives.insert(g.hard.begin(), g.hard.end());
        junk.insert(g.junk.begin(), g.junk.end());
        junk.insert(g.easy.begin(), g.easy.end());
    }
}

}  // namespace

EvalReport evaluate(const GalleryIndex& index, const Descriptors& queries, const GroundTruth& gt,
                    Protocol protocol, std::int64_t k, const std::vector<std::int64_t>& mp_ks,
                    const std::map<std::string, std::int64_t>* query_labels,
                    const std::map<std::string, std::int64_t>* gallery_labels) {
    EvalReport report;
    report.protocol = to_string(protocol);
    report.k = k;
    std::vector<GapPrediction> predictions;
    std::map<std::int64_t, double> mp_acc;
    for (auto K : mp_ks) mp_acc[K] = 0.0;

    double ap_sum = 0.0;
    for (std::int64_t qi = 0; qi < queries.count(); ++qi) {
        const std::string& qid = queries.ids[static_cast<std::size_t>(qi)];
        auto git = gt.find(qid);
        if (git == gt.end()) throw Error("evaluate: no ground truth for query " + qid);
        std::vector<SearchHit> hits = search(index, queries.rows.data() + qi * queries.dim(), index.size());
        std::vector<std::string> ranked;
        ranked.reserve(hits.size());
        for (const auto& h : hits) ranked.push_back(h.id);

        std::set<std::string> positives, junk;
        protocol_sets(git->second, protocol, positives, junk);
        ApResult ap = average_precision_at_k(ranked, positives, junk, k);
        report.per_query.push_back({qid, ap.ap, ap.counted});
        if (ap.counted) {
            ap_sum += ap.ap;
            ++report.counted;
            for (auto K : mp_ks) mp_acc[K] += precision_at_k(ranked, positives, junk, K);
        } else {
            ++report.skipped;
        }
        if (query_labels && gallery_labels && !hits.empty()) {
            auto lit = gallery_labels->find(hits[0].id);
            if (lit != gallery_labels->end()) {
                predictions.push_back({qid, lit->second, hits[0].score});
            }
        }
    }
    if (report.counted > 0) {
        report.map = ap_sum / static_cast<double>(report.counted);
        for (auto K : mp_ks) report.mp[K] = mp_acc[K] / static_cast<double>(report.counted);
    }
    if (query_labels && gallery_labels && !query_labels->empty()) {
        report.gap = gap(std::move(predictions), *query_labels);
    }
    return report;
}

GroundTruth class_ground_truth(const std::vector<Sample>& queries, const std::vector<Sample>& gallery) {
    GroundTruth gt;
    for (const auto& q : queries) {
        QueryGt entry;
        for (const auto& g : gallery) {
            if (g.label == q.label) entry.easy.push_back(g.id);
        }
        gt[q.id] = std::move(entry);
    }
    return gt;
}

Descriptors extract_descriptors(DalgModel& model, const SyntheticSpec& spec,
                                const std::vector<Sample>& samples, std::int64_t batch_size) {
    if (samples.empty()) throw Error("extract: no samples");
    if (batch_size < 1) throw Error("extract: batch size must be >= 1");
    const std::int64_t before = model.images_seen();
    Descriptors out;
    out.rows = Tensor(Shape{static_cast<std::int64_t>(samples.size()), model.config().descriptor_dim()});
    const std::int64_t C = model.config().descriptor_dim();
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<Sample> chunk(samples.begin() + static_cast<std::ptrdiff_t>(start),
                                  samples.begin() + static_cast<std::ptrdiff_t>(end));
        Graph g;
        Value images = g.constant(synthetic_batch(spec, chunk));
        Value f = model.descriptor(g, images);
        const Tensor& tf = f.tensor();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            out.ids.push_back(chunk[i].id);
            std::copy(tf.data() + static_cast<std::int64_t>(i) * C,
                      tf.data() + static_cast<std::int64_t>(i + 1) * C,
                      out.rows.data() + static_cast<std::int64_t>(start + i) * C);
        }
    }
    const std::int64_t forwarded = model.images_seen() - before;
    if (forwarded != static_cast<std::int64_t>(samples.size())) {
        throw Error("extract: " + std::to_string(forwarded) + " forward passes for " +
                    std::to_string(samples.size()) + " images (single-scale contract violated)");
    }
    return out;
}

}  // namespace dalg
