#pragma once

#include "carelay/address.hpp"
#include "carelay/bench.hpp"
#include "carelay/bytes.hpp"
#include "carelay/ca_wire.hpp"
#include "carelay/config.hpp"
#include "carelay/endpoints.hpp"
#include "carelay/netsim.hpp"
#include "carelay/packet.hpp"
#include "carelay/posix_transport.hpp"
#include "carelay/relay.hpp"
