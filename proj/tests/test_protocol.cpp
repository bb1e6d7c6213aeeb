#include <gtest/gtest.h>

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <thread>

#include "evop/ccds.h"
#include "evop/error.h"
#include "evop/oracle_spec.h"
#include "evop/protocol.h"
#include "evop/remote_oracle.h"
#include "evop/server.h"
#include "evop/transport.h"
#include "support.h"

using namespace evop;
using namespace std::chrono_literals;

namespace {

std::string cli(const std::string& args) { return std::string("'") + EVOP_CLI + "' " + args; }

std::unique_ptr<RemoteOracle> exec_oracle(const std::string& args, RemoteOptions options = {}) {
    return std::make_unique<RemoteOracle>(std::make_unique<ChildProcessChannel>(cli(args)), options);
}

// Server running serve() on a thread, connected to the client through two pipes.
class Loopback {
public:
    Loopback(FitnessOracle& oracle, ServeOptions options = {}) {
        ignore_sigpipe();
        int to_server[2];
        int to_client[2];
        if (::pipe(to_server) != 0 || ::pipe(to_client) != 0) throw std::runtime_error("pipe");
        client_ = std::make_unique<FdChannel>(to_client[0], to_server[1], true, "loopback");
        server_channel_ = std::make_unique<FdChannel>(to_server[0], to_client[1], true, "loopback-server");
        thread_ = std::thread([this, &oracle, options] { serve(oracle, *server_channel_, options); });
    }
    ~Loopback() {
        client_.reset();
        if (thread_.joinable()) thread_.join();
    }
    std::unique_ptr<LineChannel> take_client() { return std::move(client_); }
    void close_client() { client_.reset(); }

private:
    std::unique_ptr<FdChannel> client_;
    std::unique_ptr<FdChannel> server_channel_;
    std::thread thread_;
};

std::vector<PruningPattern> every_pattern(std::size_t m) {
    std::vector<PruningPattern> out;
    for (std::uint64_t mask = 0; mask < (1ull << m); ++mask) {
        std::vector<std::uint8_t> bits(m);
        for (std::size_t i = 0; i < m; ++i) bits[i] = (mask >> i) & 1u;
        out.emplace_back(std::move(bits));
    }
    return out;
}

}  // namespace

// --- message encoding -------------------------------------------------------

TEST(Messages, HelloRoundTrip) {
    protocol::Hello h;
    h.layer_count = 12;
    h.capabilities = {"eval", "embed"};
    h.agent = "x";
    const auto line = protocol::encode_hello(0, h);
    EXPECT_EQ(line, R"({"agent":"x","capabilities":["eval","embed"],"id":0,"layer_count":12,"protocol_version":1,"type":"hello"})");
    const auto back = protocol::decode_hello(protocol::parse(line));
    EXPECT_EQ(back.layer_count, 12u);
    EXPECT_EQ(back.capabilities, h.capabilities);
    EXPECT_EQ(back.protocol_version, 1);
}

TEST(Messages, EvalRoundTrip) {
    const std::vector<CalibrationSample> samples{{{72, 105}}, {{1, 2, 3}}};
    const auto line = protocol::encode_eval(7, PruningPattern::from_string("0110"), samples);
    EXPECT_EQ(line, R"({"id":7,"pattern":[0,1,1,0],"samples":[[72,105],[1,2,3]],"type":"eval"})");
    const auto msg = protocol::parse(line);
    EXPECT_EQ(msg.type, protocol::MessageType::Eval);
    EXPECT_EQ(msg.id, 7u);
    const auto req = protocol::decode_eval(msg);
    EXPECT_EQ(req.pattern.to_string(), "0110");
    EXPECT_EQ(req.samples, (std::vector<std::vector<Token>>{{72, 105}, {1, 2, 3}}));
    EXPECT_TRUE(req.texts.empty());
}

TEST(Messages, TextEvalRoundTrip) {
    const std::vector<std::string> texts{"Hi.", "a\"b\n"};
    const auto msg = protocol::parse(protocol::encode_text_eval(3, PruningPattern::from_string("10"), texts));
    const auto req = protocol::decode_eval(msg);
    EXPECT_EQ(req.texts, texts);
    EXPECT_TRUE(req.samples.empty());
}

TEST(Messages, ResultKeepsEveryBit) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double loss = rng.uniform() * std::pow(10.0, static_cast<double>(rng.below(12)) - 4);
        EXPECT_EQ(protocol::decode_result(protocol::parse(protocol::encode_result(i, loss))), loss);
    }
    EXPECT_EQ(protocol::encode_result(4, 0.5), R"({"id":4,"loss":0.5,"type":"result"})");
}

TEST(Messages, EmbedAndErrorRoundTrip) {
    const std::vector<std::string> texts{"one", "two"};
    EXPECT_EQ(protocol::decode_embed(protocol::parse(protocol::encode_embed(2, texts))), texts);
    const std::vector<std::vector<double>> v{{0.25, -1.0}, {3.0, 0.0}};
    EXPECT_EQ(protocol::decode_embedding(protocol::parse(protocol::encode_embedding(2, v))), v);
    EXPECT_EQ(protocol::decode_error(protocol::parse(protocol::encode_error(9, "boom"))), "boom");
}

TEST(Messages, MalformedLinesRejected) {
    for (const char* bad : {"", "not json", "[1,2]", R"({"id":1})", R"({"type":"eval"})",
                            R"({"type":"eval","id":-1})", R"({"type":"frobnicate","id":1})",
                            R"({"type":"eval","id":1.5})"}) {
        EXPECT_THROW(protocol::parse(bad), TransportError) << bad;
    }
    const auto no_payload = protocol::parse(R"({"type":"eval","id":1,"pattern":[0,1]})");
    EXPECT_THROW(protocol::decode_eval(no_payload), TransportError);
    const auto bad_bit = protocol::parse(R"({"type":"eval","id":1,"pattern":[0,2],"samples":[]})");
    EXPECT_THROW(protocol::decode_eval(bad_bit), TransportError);
    EXPECT_THROW(protocol::decode_result(protocol::parse(R"({"type":"result","id":1,"loss":"x"})")),
                 TransportError);
    EXPECT_THROW(protocol::decode_result(protocol::parse(R"({"type":"result","id":1,"loss":null})")),
                 TransportError);
}

// --- in-process server ------------------------------------------------------

TEST(Loopback, PopcountStub) {
    PopcountOracle stub(4);
    Loopback server(stub);
    RemoteOracle remote(server.take_client());
    EXPECT_EQ(remote.layer_count(), 4u);
    EXPECT_EQ(remote.evaluate(PruningPattern::from_string("1100"), evop::testing::unused_samples()), 0.5);
    EXPECT_EQ(remote.descriptor().agent, "evop-server");
    EXPECT_TRUE(remote.descriptor().has("eval"));
    EXPECT_TRUE(remote.descriptor().has("text-eval"));
    EXPECT_FALSE(remote.can_embed());
}

TEST(Loopback, ReorderedResponsesMatchedById) {
    for (std::size_t reorder : {1u, 3u, 8u}) {
        for (std::size_t window : {1u, 4u, 16u}) {
            PopcountOracle stub(6);
            ServeOptions so;
            so.reorder_window = reorder;
            Loopback server(stub, so);
            RemoteOptions ro;
            ro.window = window;
            RemoteOracle remote(server.take_client(), ro);
            const auto patterns = every_pattern(6);
            const auto losses = remote.evaluate_batch(patterns, evop::testing::unused_samples(), 1);
            ASSERT_EQ(losses.size(), patterns.size());
            for (std::size_t i = 0; i < patterns.size(); ++i) {
                EXPECT_EQ(losses[i], static_cast<double>(patterns[i].popcount()) / 6.0)
                    << "reorder " << reorder << " window " << window << " pattern " << patterns[i].to_string();
            }
        }
    }
}

TEST(Loopback, TextEvalMatchesTokenEval) {
    ToyOracle local(evop::testing::fixture_model());
    const auto& samples = evop::testing::fixture_samples();
    Loopback a(local);
    Loopback b(local);
    RemoteOptions text;
    text.prefer_text = true;
    RemoteOracle by_tokens(a.take_client());
    RemoteOracle by_text(b.take_client(), text);
    Rng rng(5);
    for (int i = 0; i < 10; ++i) {
        const auto p = evop::testing::random_pattern(12, 1 + rng.below(11), rng);
        const double expected = local.evaluate(p, samples);
        EXPECT_EQ(by_tokens.evaluate(p, samples), expected);
        EXPECT_EQ(by_text.evaluate(p, samples), expected);
    }
}

TEST(Loopback, RemoteErrorKeepsConnectionUsable) {
    ToyOracle local(evop::testing::small_model(0, 4));
    Loopback server(local);
    RemoteOracle remote(server.take_client());
    const auto p = PruningPattern::from_string("0100");
    // Empty sample set: the server's evaluator rejects it.
    EXPECT_THROW(remote.evaluate(p, {}), RemoteError);
    const auto samples = evop::testing::random_samples(1, 2, 8);
    EXPECT_EQ(remote.evaluate(p, samples), local.evaluate(p, samples));
}

TEST(Loopback, ErrorInsideBatchDrainsTheRest) {
    ToyOracle local(evop::testing::small_model(0, 4));
    Loopback server(local);
    RemoteOptions ro;
    ro.window = 8;
    RemoteOracle remote(server.take_client(), ro);
    const auto patterns = every_pattern(4);
    EXPECT_THROW(remote.evaluate_batch(patterns, {}, 1), RemoteError);
    const auto samples = evop::testing::random_samples(2, 1, 6);
    const auto losses = remote.evaluate_batch(patterns, samples, 1);
    for (std::size_t i = 0; i < patterns.size(); ++i) EXPECT_EQ(losses[i], local.evaluate(patterns[i], samples));
}

TEST(Loopback, ShapeCheckedBeforeSending) {
    PopcountOracle stub(4);
    Loopback server(stub);
    RemoteOracle remote(server.take_client());
    EXPECT_THROW(remote.evaluate(PruningPattern::from_string("101"), evop::testing::unused_samples()), ShapeError);
    EXPECT_EQ(remote.evaluate(PruningPattern::from_string("1010"), evop::testing::unused_samples()), 0.5);
}

TEST(Loopback, EmbedCapability) {
    PopcountOracle stub(3);
    ServeOptions so;
    so.embed_dimension = 16;
    Loopback server(stub, so);
    RemoteOracle remote(server.take_client());
    ASSERT_TRUE(remote.can_embed());
    const std::vector<std::string> texts{"The cat sat.", "Dogs bark loudly."};
    EXPECT_EQ(remote.embed(texts), HashedTrigramEmbedder(16).embed(texts));

    // The remote embedder drives CCDS like the built-in one.
    OracleEmbedder via_remote(remote);
    EXPECT_EQ(via_remote.embed(texts), HashedTrigramEmbedder(16).embed(texts));
}

TEST(Loopback, EmbedWithoutCapabilityFailsFast) {
    PopcountOracle stub(3);
    Loopback server(stub);
    RemoteOptions ro;
    ro.response_timeout = 200ms;
    RemoteOracle remote(server.take_client(), ro);
    const std::vector<std::string> texts{"x"};
    EXPECT_THROW(remote.embed(texts), CapabilityError);
    // Nothing was sent, so the next request still lines up.
    EXPECT_EQ(remote.evaluate(PruningPattern::from_string("111"), evop::testing::unused_samples()), 1.0);
}

TEST(Loopback, VersionMismatchIsHandshakeError) {
    PopcountOracle stub(3);
    ServeOptions so;
    so.protocol_version = 2;
    Loopback server(stub, so);
    EXPECT_THROW(RemoteOracle(server.take_client()), HandshakeError);
}

TEST(Loopback, ServerSeesEofAndReturns) {
    PopcountOracle stub(3);
    auto server = std::make_unique<Loopback>(stub);
    {
        RemoteOracle remote(server->take_client());
        EXPECT_EQ(remote.layer_count(), 3u);
    }
    // Joining in the destructor would hang if serve() missed the EOF.
    server.reset();
    SUCCEED();
}

// --- child processes --------------------------------------------------------

TEST(Exec, EchoServerReportsLayerCount) {
    auto remote = exec_oracle("serve --echo 7");
    EXPECT_EQ(remote->layer_count(), 7u);
    EXPECT_EQ(remote->evaluate(PruningPattern::from_string("1110000"), evop::testing::unused_samples()),
              3.0 / 7.0);
}

TEST(Exec, OracleSpecString) {
    auto oracle = make_oracle("exec:" + cli("serve --echo 4"));
    EXPECT_EQ(oracle->layer_count(), 4u);
    EXPECT_EQ(oracle->evaluate(PruningPattern::from_string("1100"), evop::testing::unused_samples()), 0.5);
}

TEST(Exec, VersionMismatch) {
    EXPECT_THROW(exec_oracle("serve --echo 4 --protocol-version 2"), HandshakeError);
}

TEST(Exec, NotAServer) {
    // A process that exits without a hello.
    EXPECT_THROW(RemoteOracle(std::make_unique<ChildProcessChannel>("true")), HandshakeError);
    // A process that answers with something other than a hello.
    EXPECT_THROW(RemoteOracle(std::make_unique<ChildProcessChannel>("echo '{\"type\":\"result\",\"id\":0,\"loss\":1}'")),
                 HandshakeError);
    EXPECT_THROW(RemoteOracle(std::make_unique<ChildProcessChannel>("echo garbage")), HandshakeError);
}

TEST(Exec, EmbedWithoutCapability) {
    auto remote = exec_oracle("serve --echo 4");
    const std::vector<std::string> texts{"x"};
    EXPECT_THROW(remote->embed(texts), CapabilityError);
    auto with = exec_oracle("serve --echo 4 --embed-dim 8");
    EXPECT_EQ(with->embed(texts), HashedTrigramEmbedder(8).embed(texts));
}

TEST(Exec, DenseEqualsAllZeroPattern) {
    const auto model = evop::testing::fixture_model();
    const auto& samples = evop::testing::fixture_samples();
    auto remote = exec_oracle("serve --oracle toy:seed=2");
    const PruningPattern dense(12);
    double mean = 0.0;
    for (const auto& s : samples) mean += model->forward_nll(dense, s.token_ids);
    mean /= static_cast<double>(samples.size());
    EXPECT_NEAR(remote->evaluate(dense, samples), mean, 1e-12);
}

TEST(Exec, LocalAndRemoteToyAgree) {
    ToyOracle local(evop::testing::fixture_model());
    const auto& pool = evop::testing::fixture_samples();
    auto remote = exec_oracle("serve --oracle toy:seed=2");
    ASSERT_EQ(remote->layer_count(), 12u);
    Rng rng(77);
    for (int i = 0; i < 100; ++i) {
        const auto p = evop::testing::random_pattern(12, rng.below(13), rng);
        std::vector<CalibrationSample> subset;
        for (const auto& s : pool) {
            if (rng.below(2) == 0) subset.push_back(s);
        }
        if (subset.empty()) subset.push_back(pool[rng.below(pool.size())]);
        EXPECT_NEAR(remote->evaluate(p, subset), local.evaluate(p, subset), 1e-9) << p.to_string();
    }
}

TEST(Exec, PipelinedOutOfOrder) {
    RemoteOptions ro;
    ro.window = 16;
    auto remote = exec_oracle("serve --echo 8 --reorder 5", ro);
    const auto patterns = every_pattern(8);
    const auto losses = remote->evaluate_batch(patterns, evop::testing::unused_samples(), 1);
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        EXPECT_EQ(losses[i], static_cast<double>(patterns[i].popcount()) / 8.0);
    }
}

TEST(Exec, KilledServerIsTransportError) {
    RemoteOptions ro;
    ro.response_timeout = 60s;
    auto remote = exec_oracle("serve --echo 4", ro);
    dynamic_cast<ChildProcessChannel&>(remote->channel()).kill_child();
    const auto start = std::chrono::steady_clock::now();
    EXPECT_THROW(remote->evaluate(PruningPattern::from_string("1000"), evop::testing::unused_samples()),
                 TransportError);
    EXPECT_LT(std::chrono::steady_clock::now() - start, 10s);
    // The oracle stays broken.
    EXPECT_THROW(remote->evaluate(PruningPattern::from_string("1000"), evop::testing::unused_samples()),
                 TransportError);
}

TEST(Exec, HangingServerTimesOut) {
    RemoteOptions ro;
    ro.response_timeout = 300ms;
    auto remote = exec_oracle("serve --echo 4 --hang", ro);
    const auto start = std::chrono::steady_clock::now();
    EXPECT_THROW(remote->evaluate(PruningPattern::from_string("1000"), evop::testing::unused_samples()),
                 TimeoutError);
    const auto took = std::chrono::steady_clock::now() - start;
    EXPECT_GE(took, 300ms);
    EXPECT_LT(took, 10s);
}

TEST(Exec, HandshakeTimeout) {
    RemoteOptions ro;
    ro.handshake_timeout = 200ms;
    EXPECT_THROW(RemoteOracle(std::make_unique<ChildProcessChannel>("sleep 5"), ro), TimeoutError);
}

TEST(Exec, ConformanceTranscript) {
    const auto problems =
        evop::testing::replay_transcript(evop::testing::data_path("conformance/popcount4.txt"), cli("serve --echo 4"));
    EXPECT_TRUE(problems.empty()) << problems.front();
    // A server that answers differently is caught.
    const auto wrong =
        evop::testing::replay_transcript(evop::testing::data_path("conformance/popcount4.txt"), cli("serve --echo 5"));
    EXPECT_FALSE(wrong.empty());
}

// --- tcp --------------------------------------------------------------------

TEST(Tcp, ServeAndConnect) {
    ignore_sigpipe();
    TcpListener listener("127.0.0.1", 0);
    ASSERT_NE(listener.port(), 0);
    ToyOracle local(evop::testing::small_model(3, 5));
    std::thread server([&] {
        auto conn = listener.accept();
        serve(local, *conn);
    });
    {
        auto remote = make_oracle("tcp:127.0.0.1:" + std::to_string(listener.port()));
        EXPECT_EQ(remote->layer_count(), 5u);
        const auto samples = evop::testing::random_samples(4, 2, 10);
        for (const auto& p : every_pattern(5)) EXPECT_EQ(remote->evaluate(p, samples), local.evaluate(p, samples));
    }
    server.join();
}

TEST(Tcp, CliServer) {
    // "serve --tcp host:0" prints the bound port; the child's stdout is the channel.
    ChildProcessChannel server(cli("serve --echo 5 --tcp 127.0.0.1:0"));
    const std::string line = server.receive_line(30s);
    ASSERT_EQ(line.rfind("listening 127.0.0.1:", 0), 0u) << line;
    auto remote = make_oracle("tcp:127.0.0.1:" + line.substr(line.rfind(':') + 1));
    EXPECT_EQ(remote->layer_count(), 5u);
    EXPECT_EQ(remote->evaluate(PruningPattern::from_string("11000"), evop::testing::unused_samples()), 0.4);
}

TEST(Tcp, ConnectionRefused) {
    std::uint16_t port;
    {
        TcpListener probe("127.0.0.1", 0);
        port = probe.port();
    }
    EXPECT_THROW(make_oracle("tcp:127.0.0.1:" + std::to_string(port)), TransportError);
}
