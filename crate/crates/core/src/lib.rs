// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Weighted, mode-switching Byzantine consensus with a deterministic
//! network simulator.

pub mod auth;
pub mod codec;
pub mod client;
pub mod forensics;
pub mod history;
pub mod ids;
pub mod messages;
pub mod modes;
pub mod netsim;
pub mod optimizer;
pub mod quorum;
pub mod replica;
pub mod service;
