// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

pub mod matrix;
pub mod report;
pub mod scenario;
pub mod sim;
