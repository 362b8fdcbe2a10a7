#![allow(dead_code)]

use std::collections::BTreeSet;

use blockflow::graph::{BlockId, Diagram};
use blockflow::stdblocks::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod codegen;

/// Random diagram of constants, gains, sums and delays. Every input is
/// driven, so the result always validates; loops may or may not appear.
pub fn random_diagram(seed: u64, max_blocks: usize) -> Diagram {
    build(seed, max_blocks, false)
}

/// Like [`random_diagram`], but sums are never fed by sums, so every
/// algebraic loop passes through a gain below 0.45 and stays well posed.
pub fn solvable_diagram(seed: u64, max_blocks: usize) -> Diagram {
    build(seed, max_blocks, true)
}

fn build(seed: u64, max_blocks: usize, solvable: bool) -> Diagram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_blocks);
    let mut d = Diagram::new();
    let mut ids = Vec::new();
    for k in 0..n {
        let id = match rng.gen_range(0..6) {
            0 if k > 0 => d.add(Constant::new(rng.gen_range(-2.0..2.0))),
            0 | 1 => d.add(Gain::new(rng.gen_range(-0.45..0.45))),
            2 => d.add(Sum::plus(2)),
            3 => d.add(Sum::new("+-").unwrap()),
            4 => d.add(UnitDelay::with_initial(rng.gen_range(-1.0..1.0))),
            _ => d.add(Integrator::new(0.1)),
        };
        ids.push(id);
    }
    // At least one source keeps executions non-trivial.
    ids.push(d.add(Constant::new(1.0)));
    for &sink in &ids {
        let inputs = d.traits(sink).unwrap().inputs.len();
        let is_sum = |b: BlockId| d.block(b).unwrap().kind() == "Sum";
        let sources: Vec<BlockId> = if solvable && is_sum(sink) {
            ids.iter().copied().filter(|&b| !is_sum(b)).collect()
        } else {
            ids.clone()
        };
        for port in 0..inputs {
            let src = sources[rng.gen_range(0..sources.len())];
            d.connect(src.o(0), sink.i(port)).unwrap();
        }
    }
    d
}

/// Algebraic loops by brute force: mutual reachability over edges between
/// direct-feedthrough blocks.
pub fn brute_force_loops(d: &Diagram) -> BTreeSet<BTreeSet<BlockId>> {
    let ids: Vec<BlockId> = d.block_ids().collect();
    let n = ids.len();
    let idx = |b: BlockId| ids.iter().position(|&x| x == b).unwrap();
    let direct = |b: BlockId| d.traits(b).unwrap().direct_feedthrough;
    let mut reach = vec![vec![false; n]; n];
    for e in d.edges() {
        let (u, v) = (e.source.block, e.sink.block);
        if direct(u) && direct(v) {
            reach[idx(u)][idx(v)] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..n)
        .filter(|&i| reach[i][i])
        .map(|i| {
            (0..n)
                .filter(|&j| reach[i][j] && reach[j][i])
                .map(|j| ids[j])
                .collect()
        })
        .collect()
}

/// Random diagram over every lowerable scalar kind, tuned so traces stay
/// bounded over hundreds of cycles. Sums only read gains below 0.45,
/// constants, inports and saturations, so loops are affine, well posed and
/// contracting. Saturations may land inside a loop, in which
/// case the engine rejects the diagram.
pub fn lowerable_diagram(seed: u64, max_blocks: usize) -> Diagram {
    use blockflow::linalg::Matrix;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=max_blocks);
    let mut d = Diagram::new();
    let mut ids = Vec::new();
    for _ in 0..n {
        let id = match rng.gen_range(0..11) {
            0 => d.add(Constant::new(rng.gen_range(-2.0..2.0))),
            1 | 2 => d.add(Gain::new(rng.gen_range(-0.45..0.45))),
            3 => d.add(Sum::plus(2)),
            4 => d.add(Sum::new("+-").unwrap()),
            5 => d.add(UnitDelay::with_initial(rng.gen_range(-1.0..1.0))),
            6 => d.add(Integrator::new(0.01).with_initial(rng.gen_range(-1.0..1.0))),
            7 => d.add(DelayLine::new(rng.gen_range(1..4))),
            8 => {
                let g = PidGains::new(
                    rng.gen_range(0.0..0.3),
                    rng.gen_range(0.0..0.3),
                    rng.gen_range(0.0..0.002),
                );
                d.add(Pid::new(g, 0.01))
            }
            9 => {
                let a = Matrix::from_vec(2, 2, (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect());
                let b = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let c = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let dd = if rng.gen_bool(0.5) {
                    0.0
                } else {
                    rng.gen_range(-0.3..0.3)
                };
                d.add(DiscreteStateSpace::new(a, b, c, dd).unwrap())
            }
            _ => {
                if rng.gen_bool(0.5) {
                    d.add(Saturation::new(-1.0, 1.0))
                } else {
                    d.add(Inport::scalar())
                }
            }
        };
        ids.push(id);
    }
    ids.push(d.add(Constant::new(1.0)));
    let kind = |d: &Diagram, b: BlockId| d.block(b).unwrap().kind();
    for &sink in &ids {
        let inputs = d.traits(sink).unwrap().inputs.len();
        let sources: Vec<BlockId> = if kind(&d, sink) == "Sum" {
            ids.iter()
                .copied()
                .filter(|&b| matches!(kind(&d, b), "Gain" | "Constant" | "Inport" | "Saturation"))
                .collect()
        } else {
            ids.clone()
        };
        for port in 0..inputs {
            let src = sources[rng.gen_range(0..sources.len())];
            d.connect(src.o(0), sink.i(port)).unwrap();
        }
    }
    d
}
