#include "taskaug/heads.hpp"

#include <string>

namespace taskaug {

HeadKind parse_head_kind(std::string_view name) {
    if (name == "proto") return HeadKind::proto;
    if (name == "ridge") return HeadKind::ridge;
    throw std::invalid_argument("unknown head '" + std::string(name) + "' (expected proto|ridge)");
}

std::string_view to_string(HeadKind kind) {
    return kind == HeadKind::proto ? "proto" : "ridge";
}

} // namespace taskaug
