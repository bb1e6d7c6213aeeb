#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "evop/ccds.h"
#include "evop/error.h"
#include "evop/rng.h"
#include "support.h"

using namespace evop;
using evop::testing::data_path;

namespace {

std::string numbered_sentences(int n) {
    std::string out;
    for (int i = 0; i < n; ++i) out += "Sentence number " + std::to_string(i) + " is here. ";
    return out;
}

double l2(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ClusterAssignment single_cluster(std::size_t n_chunks) {
    ClusterAssignment a;
    a.centroids = {{0.0}};
    a.labels.assign(n_chunks, 0);
    return a;
}

}  // namespace

// --- chunking ---------------------------------------------------------------

TEST(SplitSentences, TerminatorsNeedFollowingWhitespace) {
    auto s = split_sentences("One. Two? Three! Pi is 3.14 here. Last");
    ASSERT_EQ(s.size(), 5u);
    EXPECT_EQ(s[0], "One.");
    EXPECT_EQ(s[3], "Pi is 3.14 here.");
    EXPECT_EQ(s[4], "Last");
}

TEST(SplitSentences, BlankLineEndsSentenceAndWhitespaceCollapses) {
    auto s = split_sentences("A heading\n\nBody  text\nwraps here.");
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0], "A heading");
    EXPECT_EQ(s[1], "Body text wraps here.");
}

TEST(SplitSentences, HandCountedFixture) {
    const auto text = read_corpus(data_path("sentences20.txt"));
    std::size_t lines = 0;
    for (char c : text) lines += c == '\n';
    ASSERT_EQ(lines, 20u);
    // Counted by hand, see the fixture file.
    EXPECT_EQ(split_sentences(text).size(), 21u);
}

TEST(ChunkCorpus, ExactDivision) {
    auto chunks = chunk_corpus(numbered_sentences(10), 5);
    ASSERT_EQ(chunks.size(), 2u);
    EXPECT_EQ(chunks[0].sentence_count, 5u);
    EXPECT_EQ(chunks[1].sentence_count, 5u);
    EXPECT_EQ(chunks[1].index, 1u);
}

TEST(ChunkCorpus, RemainderChunkKept) {
    auto chunks = chunk_corpus(numbered_sentences(11), 5);
    ASSERT_EQ(chunks.size(), 3u);
    EXPECT_EQ(chunks[0].sentence_count, 5u);
    EXPECT_EQ(chunks[1].sentence_count, 5u);
    EXPECT_EQ(chunks[2].sentence_count, 1u);
    EXPECT_EQ(chunks[2].text, "Sentence number 10 is here.");
}

TEST(ChunkCorpus, TextJoinsSentencesWithSpaces) {
    auto chunks = chunk_corpus("A b.  C d?\nE f!", 3);
    ASSERT_EQ(chunks.size(), 1u);
    EXPECT_EQ(chunks[0].text, "A b. C d? E f!");
}

TEST(ChunkCorpus, Errors) {
    EXPECT_THROW(chunk_corpus("a.", 0), ConfigError);
    EXPECT_THROW(chunk_corpus("  \n\n ", 4), DatasetError);
}

TEST(ReadCorpus, DirectoryJoinsSortedFiles) {
    const auto text = read_corpus(data_path("corpus"));
    const auto astronomy = slurp(data_path("corpus/astronomy.txt"));
    EXPECT_EQ(text.substr(0, astronomy.size()), astronomy);
    EXPECT_THROW(read_corpus(data_path("does-not-exist")), Error);
}

// --- embedding --------------------------------------------------------------

TEST(Embedder, IdenticalTextsIdenticalVectors) {
    HashedTrigramEmbedder e(64);
    std::vector<std::string> texts{"the cat sat on the mat", "a different sentence", "the cat sat on the mat"};
    auto v = e.embed(texts);
    EXPECT_EQ(v[0], v[2]);
    EXPECT_NE(v[0], v[1]);
}

TEST(Embedder, UnitNormOnFixtureChunks) {
    auto chunks = chunk_corpus(read_corpus(data_path("corpus")), 4);
    HashedTrigramEmbedder e(256);
    auto embedded = embed_chunks(chunks, e);
    ASSERT_EQ(embedded.size(), chunks.size());
    for (const auto& ec : embedded) {
        EXPECT_EQ(ec.embedding.size(), 256u);
        EXPECT_NEAR(l2(ec.embedding), 1.0, 1e-9);
    }
}

TEST(Embedder, CaseInsensitive) {
    HashedTrigramEmbedder e(32);
    std::vector<std::string> texts{"Hello World", "hello world"};
    auto v = e.embed(texts);
    EXPECT_EQ(v[0], v[1]);
}

TEST(Embedder, WorkerCountDoesNotChangeOutput) {
    auto chunks = chunk_corpus(read_corpus(data_path("corpus")), 4);
    std::vector<std::string> texts;
    for (const auto& c : chunks) texts.push_back(c.text);
    EXPECT_EQ(HashedTrigramEmbedder(128, 1).embed(texts), HashedTrigramEmbedder(128, 4).embed(texts));
}

namespace {

class BrokenEmbedder : public Embedder {
public:
    explicit BrokenEmbedder(int mode) : mode_(mode) {}
    std::string name() const override { return "broken"; }
    std::vector<std::vector<double>> embed(std::span<const std::string> texts) const override {
        std::vector<std::vector<double>> out(texts.size(), std::vector<double>(3, 0.5));
        if (mode_ == 0) out[2].push_back(1.0);
        if (mode_ == 1) out[1][0] = std::nan("");
        if (mode_ == 2) throw std::runtime_error("backend down");
        return out;
    }

private:
    int mode_;
};

}  // namespace

TEST(Embedder, FailuresNameTheChunk) {
    auto chunks = chunk_corpus(numbered_sentences(8), 2);
    try {
        embed_chunks(chunks, BrokenEmbedder(0));
        FAIL() << "expected EmbedderError";
    } catch (const EmbedderError& e) {
        EXPECT_EQ(e.chunk_index(), 2u);
    }
    try {
        embed_chunks(chunks, BrokenEmbedder(1));
        FAIL() << "expected EmbedderError";
    } catch (const EmbedderError& e) {
        EXPECT_EQ(e.chunk_index(), 1u);
    }
    EXPECT_THROW(embed_chunks(chunks, BrokenEmbedder(2)), EmbedderError);
}

// --- k-means ----------------------------------------------------------------

TEST(KMeans, KPointsKClustersZeroInertia) {
    std::vector<std::vector<double>> pts{{0, 0}, {5, 1}, {-3, 7}, {2, 2}};
    auto a = kmeans(pts, 4, 1);
    EXPECT_EQ(a.inertia(), 0.0);
    std::vector<std::size_t> sorted = a.labels;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(sorted, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(KMeans, SeparatedBlobsRecovered) {
    // Two blobs of radius 1, centers 100 apart.
    Rng rng(5);
    std::vector<std::vector<double>> pts;
    std::vector<int> blob;
    for (int i = 0; i < 60; ++i) {
        const int b = i % 2;
        const double angle = rng.uniform() * 6.283185307179586;
        const double r = rng.uniform();
        pts.push_back({b * 100.0 + r * std::cos(angle), r * std::sin(angle)});
        blob.push_back(b);
    }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto a = kmeans(pts, 2, seed);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            EXPECT_EQ(a.labels[i] == a.labels[0], blob[i] == blob[0]) << "seed " << seed;
        }
    }
}

TEST(KMeans, InertiaNonIncreasingOnRandomSets) {
    Rng rng(17);
    for (int set = 0; set < 100; ++set) {
        const std::size_t n = 10 + rng.below(60);
        const std::size_t dim = 1 + rng.below(6);
        const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 8));
        std::vector<std::vector<double>> pts(n, std::vector<double>(dim));
        for (auto& p : pts) {
            for (auto& x : p) x = rng.normal() * 3.0;
        }
        auto a = kmeans(pts, k, static_cast<std::uint64_t>(set));
        for (std::size_t i = 1; i < a.inertia_history.size(); ++i) {
            EXPECT_LE(a.inertia_history[i], a.inertia_history[i - 1]) << "set " << set << " iter " << i;
        }
        auto sizes = a.cluster_sizes();
        for (auto s : sizes) EXPECT_GT(s, 0u);
    }
}

TEST(KMeans, FinalLabelsAreNearestCentroids) {
    Rng rng(2);
    std::vector<std::vector<double>> pts(40, std::vector<double>(3));
    for (auto& p : pts) {
        for (auto& x : p) x = rng.normal();
    }
    auto a = kmeans(pts, 4, 9);
    ASSERT_EQ(a.repairs, 0u);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double own = squared_distance(pts[i], a.centroids[a.labels[i]]);
        for (const auto& c : a.centroids) EXPECT_LE(own, squared_distance(pts[i], c));
    }
}

TEST(KMeans, DuplicatePointsStillFillEveryCluster) {
    std::vector<std::vector<double>> pts(6, std::vector<double>{1.0, 1.0});
    pts.push_back({4.0, 4.0});
    auto a = kmeans(pts, 3, 0);
    for (auto s : a.cluster_sizes()) EXPECT_GT(s, 0u);
}

TEST(KMeans, Errors) {
    std::vector<std::vector<double>> pts{{0.0}, {1.0}};
    EXPECT_THROW(kmeans(pts, 0, 0), ConfigError);
    EXPECT_THROW(kmeans(pts, 3, 0), DatasetError);
    std::vector<std::vector<double>> ragged{{0.0}, {1.0, 2.0}};
    EXPECT_THROW(kmeans(ragged, 1, 0), ShapeError);
}

// --- sampling ---------------------------------------------------------------

TEST(SampleCalibration, SingleChunkRepeats) {
    std::vector<Chunk> chunks{{"abc", 0, 1}};
    auto ds = sample_calibration(single_cluster(1), chunks, 1, 8, byte_tokenizer(), 0);
    ASSERT_EQ(ds.sample_count(), 1u);
    EXPECT_EQ(decode_bytes(ds.groups[0][0].token_ids), "abcabcab");
    EXPECT_EQ(ds.sources[0][0], (std::vector<std::size_t>{0, 0, 0}));
}

TEST(SampleCalibration, StratifiedAndExactLength) {
    const auto chunks = chunk_corpus(read_corpus(data_path("corpus")), 4);
    HashedTrigramEmbedder e(256);
    std::vector<std::vector<double>> pts;
    for (auto& ec : embed_chunks(chunks, e)) pts.push_back(ec.embedding);
    const auto assignment = kmeans(pts, 5, 0);
    auto ds = sample_calibration(assignment, chunks, 3, 100, byte_tokenizer(), 4);
    ASSERT_EQ(ds.groups.size(), 5u);
    for (std::size_t c = 0; c < 5; ++c) {
        ASSERT_EQ(ds.groups[c].size(), 3u);
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_EQ(ds.groups[c][i].token_ids.size(), 100u);
            // Rebuild the sample from the recorded chunks, each from cluster c.
            std::vector<Token> rebuilt;
            for (auto src : ds.sources[c][i]) {
                EXPECT_EQ(assignment.labels[src], c);
                auto t = encode_bytes(chunks[src].text);
                rebuilt.insert(rebuilt.end(), t.begin(), t.end());
            }
            ASSERT_GE(rebuilt.size(), 100u);
            rebuilt.resize(100);
            EXPECT_EQ(rebuilt, ds.groups[c][i].token_ids);
        }
    }
}

TEST(SampleCalibration, EmptyClusterTokensRejected) {
    std::vector<Chunk> chunks{{"", 0, 1}};
    EXPECT_THROW(sample_calibration(single_cluster(1), chunks, 1, 8, byte_tokenizer(), 0), DatasetError);
}

TEST(SampleCalibration, WorkerCountDoesNotChangeOutput) {
    const auto chunks = chunk_corpus(read_corpus(data_path("corpus")), 4);
    ClusterAssignment a;
    a.centroids.resize(3);
    for (std::size_t i = 0; i < chunks.size(); ++i) a.labels.push_back(i % 3);
    auto one = sample_calibration(a, chunks, 4, 64, byte_tokenizer(), 7, 1);
    auto four = sample_calibration(a, chunks, 4, 64, byte_tokenizer(), 7, 4);
    EXPECT_EQ(one.groups, four.groups);
    EXPECT_EQ(one.sources, four.sources);
}

// --- pipeline ---------------------------------------------------------------

TEST(BuildDataset, DefaultsGiveFiveSamplesOf2048) {
    CcdsConfig c;
    EXPECT_EQ(c.clusters, 5u);
    EXPECT_EQ(c.per_cluster, 1u);
    EXPECT_EQ(c.sample_len, 2048u);
    auto ds = build_calibration_dataset(read_corpus(data_path("corpus")), c);
    ASSERT_EQ(ds.groups.size(), 5u);
    for (const auto& g : ds.groups) {
        ASSERT_EQ(g.size(), 1u);
        EXPECT_EQ(g[0].token_ids.size(), 2048u);
    }
}

TEST(BuildDataset, SameSeedBitIdentical) {
    const auto corpus = read_corpus(data_path("corpus"));
    auto c = evop::testing::fixture_ccds_config();
    auto a = dataset_to_json(build_calibration_dataset(corpus, c)).dump();
    auto b = dataset_to_json(build_calibration_dataset(corpus, c)).dump();
    EXPECT_EQ(a, b);
    c.workers = 4;
    EXPECT_EQ(dataset_to_json(build_calibration_dataset(corpus, c)).dump(), a);
    c.seed = 1;
    EXPECT_NE(dataset_to_json(build_calibration_dataset(corpus, c)).dump(), a);
}

TEST(BuildDataset, TooFewChunksRejected) {
    CcdsConfig c;
    c.clusters = 5;
    EXPECT_THROW(build_calibration_dataset(numbered_sentences(3), c), DatasetError);
}

TEST(DatasetFile, RoundTrip) {
    auto ds = build_calibration_dataset(read_corpus(data_path("corpus")), evop::testing::fixture_ccds_config());
    const auto path = std::filesystem::temp_directory_path() / "evop_test_dataset.json";
    write_dataset(ds, path);
    auto back = read_dataset(path);
    EXPECT_EQ(back.groups, ds.groups);
    EXPECT_EQ(back.sources, ds.sources);
    EXPECT_EQ(back.provenance, ds.provenance);
    auto j = nlohmann::json::parse(slurp(path));
    EXPECT_EQ(j["schema_version"], 1);
    EXPECT_EQ(j["kind"], "evop.calibration_dataset");
    std::filesystem::remove(path);
}

TEST(DatasetFile, RejectsWrongSchema) {
    nlohmann::json j = {{"schema_version", 2}, {"groups", nlohmann::json::array()}};
    EXPECT_THROW(dataset_from_json(j), DatasetError);
    EXPECT_THROW(dataset_from_json(nlohmann::json{{"schema_version", 1}}), DatasetError);
}
