#include "evop/ccds.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "evop/error.h"
#include "evop/parallel.h"
#include "evop/rng.h"

namespace evop {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::string normalize_whitespace(std::string_view s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(c);
    }
    return out;
}

// True when text[pos] == '\n' starts a blank line (only spaces/tabs/CR up to the next '\n').
bool blank_line_at(std::string_view text, std::size_t pos) {
    for (std::size_t j = pos + 1; j < text.size(); ++j) {
        if (text[j] == '\n') return true;
        if (text[j] != ' ' && text[j] != '\t' && text[j] != '\r') return false;
    }
    return false;
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::size_t> nearest_labels(std::span<const std::vector<double>> points,
                                        const std::vector<std::vector<double>>& centroids) {
    std::vector<std::size_t> labels(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < centroids.size(); ++c) {
            const double d = squared_distance(points[i], centroids[c]);
            if (d < best) {
                best = d;
                labels[i] = c;
            }
        }
    }
    return labels;
}

double compute_inertia(std::span<const std::vector<double>> points,
                       const std::vector<std::vector<double>>& centroids,
                       const std::vector<std::size_t>& labels) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
        total += squared_distance(points[i], centroids[labels[i]]);
    }
    return total;
}

// Gives every empty cluster the point farthest from its own centroid, taken
// from a cluster with at least two members. Returns the number of moves.
std::size_t repair_empty_clusters(std::span<const std::vector<double>> points,
                                  std::vector<std::vector<double>>& centroids,
                                  std::vector<std::size_t>& labels) {
    std::size_t repairs = 0;
    std::vector<std::size_t> sizes(centroids.size(), 0);
    for (auto l : labels) ++sizes[l];
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        if (sizes[c] != 0) continue;
        std::size_t victim = points.size();
        double farthest = -1.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (sizes[labels[i]] < 2) continue;
            const double d = squared_distance(points[i], centroids[labels[i]]);
            if (d > farthest) {
                farthest = d;
                victim = i;
            }
        }
        if (victim == points.size()) break;  // unreachable while n >= k
        --sizes[labels[victim]];
        labels[victim] = c;
        ++sizes[c];
        centroids[c] = points[victim];
        ++repairs;
    }
    return repairs;
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view text) {
    std::vector<std::string> sentences;
    std::size_t start = 0;
    auto emit = [&](std::size_t end) {
        auto s = normalize_whitespace(text.substr(start, end - start));
        if (!s.empty()) sentences.push_back(std::move(s));
        start = end;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '.' || c == '?' || c == '!') {
            if (i + 1 == text.size() || is_space(text[i + 1])) emit(i + 1);
        } else if (c == '\n' && blank_line_at(text, i)) {
            emit(i);
        }
    }
    emit(text.size());
    return sentences;
}

std::vector<Chunk> chunk_corpus(std::string_view corpus, std::size_t sentences_per_chunk) {
    if (sentences_per_chunk == 0) throw ConfigError("sentences_per_chunk must be positive");
    const auto sentences = split_sentences(corpus);
    if (sentences.empty()) throw DatasetError("corpus contains no sentences");
    std::vector<Chunk> chunks;
    for (std::size_t i = 0; i < sentences.size(); i += sentences_per_chunk) {
        Chunk chunk;
        chunk.index = chunks.size();
        const std::size_t end = std::min(sentences.size(), i + sentences_per_chunk);
        for (std::size_t j = i; j < end; ++j) {
            if (!chunk.text.empty()) chunk.text.push_back(' ');
            chunk.text += sentences[j];
        }
        chunk.sentence_count = end - i;
        chunks.push_back(std::move(chunk));
    }
    return chunks;
}

std::string read_corpus(const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        if (!in) throw Error("cannot read corpus file " + p.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    if (!fs::exists(path)) throw Error("corpus path does not exist: " + path.string());
    if (!fs::is_directory(path)) return slurp(path);

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
        if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::string out;
    for (const auto& f : files) {
        if (!out.empty()) out += "\n\n";
        out += slurp(f);
    }
    return out;
}

HashedTrigramEmbedder::HashedTrigramEmbedder(std::size_t dimension, std::size_t workers)
    : dimension_(dimension), workers_(workers) {
    if (dimension_ == 0) throw ConfigError("embedding dimension must be positive");
}

std::string HashedTrigramEmbedder::name() const {
    return "hashed-trigram-tfidf/" + std::to_string(dimension_);
}

std::vector<std::vector<double>> HashedTrigramEmbedder::embed(
    std::span<const std::string> texts) const {
    std::vector<std::vector<double>> tf(texts.size());
    parallel_for(texts.size(), workers_, [&](std::size_t i) {
        std::string padded = " ";
        for (unsigned char c : texts[i]) padded.push_back(static_cast<char>(std::tolower(c)));
        padded.push_back(' ');
        auto& v = tf[i];
        v.assign(dimension_, 0.0);
        if (texts[i].empty()) return;
        for (std::size_t j = 0; j + 3 <= padded.size(); ++j) {
            v[fnv1a(std::string_view(padded).substr(j, 3)) % dimension_] += 1.0;
        }
    });

    std::vector<double> df(dimension_, 0.0);
    for (const auto& v : tf) {
        for (std::size_t h = 0; h < dimension_; ++h) {
            if (v[h] > 0.0) df[h] += 1.0;
        }
    }
    const double n = static_cast<double>(texts.size());
    std::vector<double> idf(dimension_);
    for (std::size_t h = 0; h < dimension_; ++h) idf[h] = std::log((1.0 + n) / (1.0 + df[h])) + 1.0;

    for (auto& v : tf) {
        double norm = 0.0;
        for (std::size_t h = 0; h < dimension_; ++h) {
            v[h] *= idf[h];
            norm += v[h] * v[h];
        }
        if (norm > 0.0) {
            norm = std::sqrt(norm);
            for (auto& x : v) x /= norm;
        }
    }
    return tf;
}

std::vector<EmbeddedChunk> embed_chunks(std::span<const Chunk> chunks, const Embedder& embedder) {
    if (chunks.empty()) throw DatasetError("no chunks to embed");
    std::vector<std::string> texts;
    texts.reserve(chunks.size());
    for (const auto& c : chunks) texts.push_back(c.text);

    std::vector<std::vector<double>> vectors;
    try {
        vectors = embedder.embed(texts);
    } catch (const EmbedderError&) {
        throw;
    } catch (const std::exception& e) {
        throw EmbedderError(chunks.front().index, e.what());
    }
    if (vectors.size() != chunks.size()) {
        throw EmbedderError(chunks[std::min(vectors.size(), chunks.size() - 1)].index,
                            "embedder returned " + std::to_string(vectors.size()) +
                                " vectors for " + std::to_string(chunks.size()) + " chunks");
    }
    const std::size_t dim = vectors.front().size();
    std::vector<EmbeddedChunk> out;
    out.reserve(chunks.size());
    for (std::size_t i = 0; i < chunks.size(); ++i) {
        if (vectors[i].size() != dim || dim == 0) {
            throw EmbedderError(chunks[i].index, "inconsistent embedding dimension");
        }
        for (double x : vectors[i]) {
            if (!std::isfinite(x)) throw EmbedderError(chunks[i].index, "non-finite component");
        }
        out.push_back(EmbeddedChunk{chunks[i].index, std::move(vectors[i])});
    }
    return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

std::vector<std::size_t> ClusterAssignment::cluster_sizes() const {
    std::vector<std::size_t> sizes(centroids.size(), 0);
    for (auto l : labels) ++sizes[l];
    return sizes;
}

ClusterAssignment kmeans(std::span<const std::vector<double>> points, std::size_t k,
                         std::uint64_t seed, std::size_t max_iters) {
    if (k == 0) throw ConfigError("k-means needs at least one cluster");
    if (points.size() < k) {
        throw DatasetError("k-means: " + std::to_string(points.size()) + " points for " +
                           std::to_string(k) + " clusters");
    }
    const std::size_t dim = points.front().size();
    for (const auto& p : points) {
        if (p.size() != dim) throw ShapeError("k-means: points have different dimensions");
    }
    const std::size_t n = points.size();

    // k-means++ seeding.
    Rng rng(derive_seed(seed, {kStreamKMeans}));
    ClusterAssignment result;
    result.centroids.push_back(points[rng.below(n)]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], result.centroids[0]);
    while (result.centroids.size() < k) {
        double total = 0.0;
        for (double d : d2) total += d;
        std::size_t pick = n - 1;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.below(n);
        }
        result.centroids.push_back(points[pick]);
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points[i], result.centroids.back()));
        }
    }

    result.labels = nearest_labels(points, result.centroids);
    result.repairs += repair_empty_clusters(points, result.centroids, result.labels);
    result.inertia_history.push_back(compute_inertia(points, result.centroids, result.labels));

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            auto& s = sums[result.labels[i]];
            for (std::size_t j = 0; j < dim; ++j) s[j] += points[i][j];
            ++counts[result.labels[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t j = 0; j < dim; ++j) {
                result.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
            }
        }
        auto labels = nearest_labels(points, result.centroids);
        result.repairs += repair_empty_clusters(points, result.centroids, labels);
        result.inertia_history.push_back(compute_inertia(points, result.centroids, labels));
        ++result.iterations;
        const bool converged = labels == result.labels;
        result.labels = std::move(labels);
        if (converged) break;
    }
    return result;
}

Tokenizer byte_tokenizer() {
    return [](std::string_view text) { return encode_bytes(text, false); };
}

std::size_t CalibrationDataset::sample_count() const {
    std::size_t n = 0;
    for (const auto& g : groups) n += g.size();
    return n;
}

std::vector<CalibrationSample> CalibrationDataset::flattened() const {
    std::vector<CalibrationSample> out;
    out.reserve(sample_count());
    for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
    return out;
}

CalibrationDataset sample_calibration(const ClusterAssignment& assignment,
                                      std::span<const Chunk> chunks, std::size_t per_cluster,
                                      std::size_t len, const Tokenizer& tokenizer,
                                      std::uint64_t seed, std::size_t workers) {
    if (per_cluster == 0) throw ConfigError("samples per cluster must be positive");
    if (len == 0) throw ConfigError("sample length must be positive");
    if (assignment.labels.size() != chunks.size()) {
        throw ShapeError("cluster assignment does not cover the chunk list");
    }
    const std::size_t k = assignment.cluster_count();

    std::vector<std::vector<Token>> chunk_tokens(chunks.size());
    parallel_for(chunks.size(), workers,
                 [&](std::size_t i) { chunk_tokens[i] = tokenizer(chunks[i].text); });

    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < chunks.size(); ++i) members[assignment.labels[i]].push_back(i);
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t mass = 0;
        for (auto i : members[c]) mass += chunk_tokens[i].size();
        if (mass == 0) {
            throw DatasetError("cluster " + std::to_string(c) + " has no tokens to sample from");
        }
    }

    CalibrationDataset ds;
    ds.groups.assign(k, std::vector<CalibrationSample>(per_cluster));
    ds.sources.assign(k, std::vector<std::vector<std::size_t>>(per_cluster));
    parallel_for(k * per_cluster, workers, [&](std::size_t task) {
        const std::size_t c = task / per_cluster;
        const std::size_t i = task % per_cluster;
        Rng rng(derive_seed(seed, {kStreamSampling, c, i}));
        auto& tokens = ds.groups[c][i].token_ids;
        auto& used = ds.sources[c][i];
        while (tokens.size() < len) {
            const std::size_t chunk = members[c][rng.below(members[c].size())];
            used.push_back(chunks[chunk].index);
            tokens.insert(tokens.end(), chunk_tokens[chunk].begin(), chunk_tokens[chunk].end());
        }
        tokens.resize(len);
    });
    return ds;
}

void CcdsConfig::validate() const {
    if (sentences_per_chunk == 0) throw ConfigError("sentences_per_chunk must be positive");
    if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
    if (clusters == 0) throw ConfigError("clusters must be positive");
    if (per_cluster == 0) throw ConfigError("per_cluster must be positive");
    if (sample_len < 2) throw ConfigError("sample_len must be at least 2");
}

CalibrationDataset build_calibration_dataset(std::string_view corpus, const CcdsConfig& config,
                                             const Embedder* embedder, std::string corpus_id) {
    config.validate();
    const auto chunks = chunk_corpus(corpus, config.sentences_per_chunk);
    if (chunks.size() < config.clusters) {
        throw DatasetError("corpus yields " + std::to_string(chunks.size()) +
                           " chunks, fewer than the " + std::to_string(config.clusters) +
                           " requested clusters");
    }

    const HashedTrigramEmbedder builtin(config.embedding_dim, config.workers);
    const Embedder& used = embedder ? *embedder : builtin;
    const auto embedded = embed_chunks(chunks, used);
    std::vector<std::vector<double>> points;
    points.reserve(embedded.size());
    for (const auto& e : embedded) points.push_back(e.embedding);

    const auto assignment = kmeans(points, config.clusters, config.seed, config.kmeans_max_iters);
    auto ds = sample_calibration(assignment, chunks, config.per_cluster, config.sample_len,
                                 byte_tokenizer(), config.seed, config.workers);

    ds.provenance = {
        {"corpus_id", corpus_id.empty() ? fingerprint(corpus) : corpus_id},
        {"corpus_bytes", corpus.size()},
        {"embedder", used.name()},
        {"tokenizer", "bytes"},
        {"seed", config.seed},
        {"config",
         {{"sentences_per_chunk", config.sentences_per_chunk},
          {"embedding_dim", config.embedding_dim},
          {"clusters", config.clusters},
          {"per_cluster", config.per_cluster},
          {"sample_len", config.sample_len},
          {"kmeans_max_iters", config.kmeans_max_iters}}},
        {"chunk_count", chunks.size()},
        {"cluster_sizes", assignment.cluster_sizes()},
        {"kmeans", {{"iterations", assignment.iterations}, {"repairs", assignment.repairs}}},
    };
    return ds;
}

std::string fingerprint(std::string_view bytes) {
    static constexpr char kHex[] = "0123456789abcdef";
    std::uint64_t h = fnv1a(bytes);
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = kHex[h & 0xf];
        h >>= 4;
    }
    return out;
}

nlohmann::json dataset_to_json(const CalibrationDataset& dataset) {
    nlohmann::json groups = nlohmann::json::array();
    for (std::size_t c = 0; c < dataset.groups.size(); ++c) {
        nlohmann::json samples = nlohmann::json::array();
        for (std::size_t i = 0; i < dataset.groups[c].size(); ++i) {
            nlohmann::json s = {{"tokens", dataset.groups[c][i].token_ids}};
            if (c < dataset.sources.size() && i < dataset.sources[c].size()) {
                s["source_chunks"] = dataset.sources[c][i];
            }
            samples.push_back(std::move(s));
        }
        groups.push_back({{"cluster", c}, {"samples", std::move(samples)}});
    }
    return {{"schema_version", kDatasetSchemaVersion},
            {"kind", "evop.calibration_dataset"},
            {"provenance", dataset.provenance},
            {"groups", std::move(groups)}};
}

CalibrationDataset dataset_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema_version").get<int>() != kDatasetSchemaVersion) {
            throw DatasetError("unsupported dataset schema_version " + j.at("schema_version").dump());
        }
        CalibrationDataset ds;
        ds.provenance = j.value("provenance", nlohmann::json::object());
        for (const auto& g : j.at("groups")) {
            auto& group = ds.groups.emplace_back();
            auto& sources = ds.sources.emplace_back();
            for (const auto& s : g.at("samples")) {
                group.push_back(CalibrationSample{s.at("tokens").get<std::vector<Token>>()});
                sources.push_back(s.value("source_chunks", std::vector<std::size_t>{}));
            }
        }
        if (ds.sample_count() == 0) throw DatasetError("dataset has no samples");
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError(std::string("malformed dataset JSON: ") + e.what());
    }
}

void write_dataset(const CalibrationDataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write dataset file " + path.string());
    out << dataset_to_json(dataset).dump() << '\n';
    if (!out) throw Error("failed writing dataset file " + path.string());
}

CalibrationDataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read dataset file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DatasetError("dataset file is not JSON: " + std::string(e.what()));
    }
    return dataset_from_json(j);
}

}  // namespace evop
