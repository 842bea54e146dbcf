// Copyright (c) The flashbft Contributors
// SPDX-License-Identifier: Apache-2.0

//! Linearizability checking (Wing–Gong search with memoization).

use std::collections::HashSet;
use std::hash::Hash;

/// A sequential object the history is checked against.
pub trait SequentialSpec {
    type State: Clone + Eq + Hash;
    type Op;
    type Ret: PartialEq;

    fn init(&self) -> Self::State;
    fn step(&self, state: &Self::State, op: &Self::Op) -> (Self::State, Self::Ret);
}

/// One operation of a concurrent history. `ret == None` marks a pending
/// operation, which may or may not have taken effect.
#[derive(Clone, Debug)]
pub struct HistOp<O, R> {
    pub call: u64,
    pub ret: Option<(u64, R)>,
    pub op: O,
}

/// The counter service: every operation increments and returns the new value.
#[derive(Clone, Copy, Debug, Default)]
pub struct CounterSpec;

impl SequentialSpec for CounterSpec {
    type State = u64;
    type Op = ();
    type Ret = u64;

    fn init(&self) -> u64 {
        0
    }

    fn step(&self, s: &u64, _: &()) -> (u64, u64) {
        (s + 1, s + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotLinearizable {
    /// Operations linearized on the deepest path found.
    pub deepest: usize,
}

/// Checks `history` and returns a witness order of the linearized
/// operations (indices into `history`).
pub fn check<S: SequentialSpec>(spec: &S, history: &[HistOp<S::Op, S::Ret>]) -> Result<Vec<usize>, NotLinearizable> {
    let n = history.len();
    let words = n.div_ceil(64).max(1);
    let completed: Vec<usize> = (0..n).filter(|&i| history[i].ret.is_some()).collect();
    let mut done = vec![0u64; words];
    let mut seen: HashSet<(Vec<u64>, S::State)> = HashSet::new();
    let mut order = Vec::new();
    let mut deepest = 0;
    let is_done = |d: &[u64], i: usize| d[i / 64] >> (i % 64) & 1 == 1;

    // Explicit stack of (state, candidate cursor).
    let mut stack: Vec<(S::State, usize)> = vec![(spec.init(), 0)];
    loop {
        if completed.iter().all(|&i| is_done(&done, i)) {
            return Ok(order);
        }
        let depth = stack.len() - 1;
        let (state, cursor) = stack[depth].clone();
        // Earliest return among operations not yet linearized bounds the candidates.
        let horizon = completed.iter().filter(|&&i| !is_done(&done, i)).map(|&i| history[i].ret.as_ref().unwrap().0).min().unwrap_or(u64::MAX);
        let mut advanced = false;
        let mut c = cursor;
        while c < n {
            let i = c;
            c += 1;
            if is_done(&done, i) || history[i].call > horizon {
                continue;
            }
            let (next, out) = spec.step(&state, &history[i].op);
            if let Some((_, expect)) = &history[i].ret {
                if *expect != out {
                    continue;
                }
            }
            done[i / 64] |= 1 << (i % 64);
            if !seen.insert((done.clone(), next.clone())) {
                done[i / 64] &= !(1 << (i % 64));
                continue;
            }
            stack[depth].1 = c;
            stack.push((next, 0));
            order.push(i);
            deepest = deepest.max(order.len());
            advanced = true;
            break;
        }
        if !advanced {
            if depth == 0 {
                return Err(NotLinearizable { deepest });
            }
            stack.pop();
            let i = order.pop().unwrap();
            done[i / 64] &= !(1 << (i % 64));
        }
    }
}
