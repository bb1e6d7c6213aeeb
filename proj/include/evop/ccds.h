#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evop/toy_lm.h"

namespace evop {

// ---------------------------------------------------------------------------
// Chunking
// ---------------------------------------------------------------------------

struct Chunk {
    std::string text;
    std::size_t index = 0;
    std::size_t sentence_count = 0;
};

/// Splits on '.', '?' or '!' followed by whitespace or end of text, and on
/// blank lines. Sentences keep their terminator; internal whitespace runs
/// collapse to a single space; empty sentences are dropped.
std::vector<std::string> split_sentences(std::string_view text);

/// Groups sentences in order into chunks of `sentences_per_chunk`; a final
/// partial chunk is kept. Chunk text joins its sentences with single spaces.
std::vector<Chunk> chunk_corpus(std::string_view corpus, std::size_t sentences_per_chunk);

/// Reads one UTF-8 text file, or every *.txt in a directory (sorted by file
/// name, joined by blank lines so sentences never straddle files).
std::string read_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::string name() const = 0;
    /// Embeds a batch. Embedders may use the whole batch (e.g. for IDF), so
    /// callers pass every chunk of a run at once.
    virtual std::vector<std::vector<double>> embed(std::span<const std::string> texts) const = 0;
};

/// TF-IDF over hashed, lower-cased byte trigrams, L2-normalized. IDF is
/// fitted on the batch being embedded; term counting runs on `workers`
/// threads with results assembled by index.
class HashedTrigramEmbedder : public Embedder {
public:
    explicit HashedTrigramEmbedder(std::size_t dimension = 256, std::size_t workers = 1);

    std::string name() const override;
    std::size_t dimension() const { return dimension_; }
    std::vector<std::vector<double>> embed(std::span<const std::string> texts) const override;

private:
    std::size_t dimension_;
    std::size_t workers_;
};

struct EmbeddedChunk {
    std::size_t chunk_index = 0;
    std::vector<double> embedding;
};

/// One vector per chunk. Throws EmbedderError naming the offending chunk when
/// the embedder fails or returns a ragged / non-finite vector.
std::vector<EmbeddedChunk> embed_chunks(std::span<const Chunk> chunks, const Embedder& embedder);

// ---------------------------------------------------------------------------
// Clustering
// ---------------------------------------------------------------------------

struct ClusterAssignment {
    std::vector<std::vector<double>> centroids;
    std::vector<std::size_t> labels;  // per point, in [0, k)
    /// Inertia after seeding, then after every Lloyd iteration.
    std::vector<double> inertia_history;
    std::size_t iterations = 0;
    /// Empty-cluster repairs performed (each steals one point).
    std::size_t repairs = 0;

    std::size_t cluster_count() const { return centroids.size(); }
    double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
    std::vector<std::size_t> cluster_sizes() const;
};

double squared_distance(std::span<const double> a, std::span<const double> b);

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iters`
/// iterations or once assignments stop changing. A cluster that empties takes
/// the point farthest from its own centroid (from a cluster that can spare it).
ClusterAssignment kmeans(std::span<const std::vector<double>> points, std::size_t k,
                         std::uint64_t seed, std::size_t max_iters = 100);

// ---------------------------------------------------------------------------
// Stratified sampling
// ---------------------------------------------------------------------------

using Tokenizer = std::function<std::vector<Token>(std::string_view)>;

/// Byte tokenizer without BOS: chunk tokens concatenate directly into samples.
Tokenizer byte_tokenizer();

struct CalibrationDataset {
    /// groups[c][i] is sample i drawn from cluster c.
    std::vector<std::vector<CalibrationSample>> groups;
    /// sources[c][i] lists the chunk indices appended (in order) to build it.
    std::vector<std::vector<std::vector<std::size_t>>> sources;
    nlohmann::json provenance = nlohmann::json::object();

    std::size_t sample_count() const;
    /// Samples of every cluster, cluster-major.
    std::vector<CalibrationSample> flattened() const;
};

/// For each cluster, builds n samples by appending uniformly drawn chunks of
/// that cluster (with replacement) until at least `len` tokens are collected,
/// then truncating to exactly `len`. Sample (c, i) draws from its own stream
/// derive_seed(seed, {kStreamSampling, c, i}).
CalibrationDataset sample_calibration(const ClusterAssignment& assignment,
                                      std::span<const Chunk> chunks, std::size_t per_cluster,
                                      std::size_t len, const Tokenizer& tokenizer,
                                      std::uint64_t seed, std::size_t workers = 1);

struct CcdsConfig {
    std::size_t sentences_per_chunk = 8;
    std::size_t embedding_dim = 256;
    std::size_t clusters = 5;
    std::size_t per_cluster = 1;
    std::size_t sample_len = 2048;
    std::size_t kmeans_max_iters = 100;
    std::uint64_t seed = 0;
    std::size_t workers = 1;

    void validate() const;
};

/// Chunk -> embed -> cluster -> sample. Uses the built-in trigram embedder
/// when `embedder` is null. A pure function of (corpus, config, embedder).
CalibrationDataset build_calibration_dataset(std::string_view corpus, const CcdsConfig& config,
                                             const Embedder* embedder = nullptr,
                                             std::string corpus_id = {});

inline constexpr int kDatasetSchemaVersion = 1;

nlohmann::json dataset_to_json(const CalibrationDataset& dataset);
CalibrationDataset dataset_from_json(const nlohmann::json& j);
void write_dataset(const CalibrationDataset& dataset, const std::filesystem::path& path);
CalibrationDataset read_dataset(const std::filesystem::path& path);

/// Hex FNV-1a 64 of the bytes; used as the corpus id in provenance.
std::string fingerprint(std::string_view bytes);

}  // namespace evop
