#pragma once

#ifndef SVOS_VERSION
#define SVOS_VERSION "0.0.0"
#endif

namespace svos {
inline constexpr const char* kVersion = SVOS_VERSION;
}
