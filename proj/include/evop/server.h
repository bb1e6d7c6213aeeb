#pragma once

#include <cstddef>
#include <string>

#include "evop/oracle.h"
#include "evop/protocol.h"
#include "evop/transport.h"

namespace evop {

struct ServeOptions {
    /// Version advertised in the server hello.
    int protocol_version = protocol::kVersion;
    /// Responses are buffered up to this many and flushed in reverse order
    /// (also flushed whenever no further request is waiting). 1 = in order.
    std::size_t reorder_window = 1;
    /// Read requests but never answer them (timeout testing).
    bool hang = false;
    /// When > 0, advertise "embed" backed by the built-in trigram embedder.
    std::size_t embed_dimension = 0;
    std::string agent = "evop-server";
};

/// Serves one connection until the peer closes it. "eval" requests carry
/// token ids; "text-eval" requests are byte-tokenized server-side.
void serve(FitnessOracle& oracle, LineChannel& channel, const ServeOptions& options = {});

}  // namespace evop
