#include "ctxar/error.hpp"

namespace ctxar {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::usage: return "usage";
        case ErrorCode::config: return "config";
        case ErrorCode::shape: return "shape";
        case ErrorCode::contract: return "contract";
        case ErrorCode::range: return "range";
        case ErrorCode::numeric: return "numeric";
        case ErrorCode::io: return "io";
        case ErrorCode::format: return "format";
        case ErrorCode::fingerprint: return "fingerprint";
        case ErrorCode::data: return "data";
    }
    return "unknown";
}

}  // namespace ctxar
