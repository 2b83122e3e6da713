#![allow(dead_code)]

use pitwi::induction::{generate_masks, MaskedSample};
use pitwi::pattern::{GateMode, Pattern, PatternKind, PatternLibrary};
use pitwi::world::{Domain, Layout, Value, VariableId, WorldModel};
use rand::Rng;

pub const GRID: usize = 8;

pub fn lake_layout() -> Layout {
    Layout::Grid { rows: GRID, cols: GRID }
}

/// Grid-block library with random targets, partial contexts and weights.
pub fn random_library(rng: &mut impl Rng, gate: GateMode) -> PatternLibrary {
    let mut lib = PatternLibrary::new(Domain::Lake, 0.001, gate).unwrap();
    let n = rng.gen_range(2..16);
    while lib.len() < n {
        let target = rng.gen_range(0..16u8);
        let mut context = Vec::new();
        for slot in 0..16u8 {
            if slot != target && rng.gen_bool(0.3) {
                context.push((slot, Value(rng.gen_range(0..2))));
            }
        }
        if context.is_empty() {
            context.push(((target + 1) % 16, Value(rng.gen_range(0..2))));
        }
        let p = Pattern {
            kind: PatternKind::GridBlock,
            target,
            context,
            prediction: Value(rng.gen_range(0..2)),
            weight: rng.gen_range(0.1..5.0),
        };
        lib.add(p).unwrap();
    }
    lib
}

/// World with each cell revealed with probability `p`.
pub fn random_world(rng: &mut impl Rng, p: f64) -> WorldModel {
    let mut w = WorldModel::new(Domain::Lake, lake_layout());
    for i in 0..(GRID * GRID) as u32 {
        if rng.gen_bool(p) {
            w.insert_revealed(VariableId(i), Value(rng.gen_range(0..2))).unwrap();
        }
    }
    w
}

pub fn random_dataset(rng: &mut impl Rng) -> Vec<MaskedSample> {
    let mut out = Vec::new();
    while out.is_empty() {
        for _ in 0..rng.gen_range(1..4) {
            let p = rng.gen_range(0.3..0.9);
            let world = random_world(rng, p);
            if let Ok(samples) = generate_masks(&world, 0.25, 3, rng.gen()) {
                out.extend(samples);
            }
        }
    }
    out
}

/// BFS distance over safe cells, independent of the crate's planner.
pub fn lake_distance(grid: &[Value], size: usize, from: (usize, usize), to: (usize, usize)) -> Option<usize> {
    let mut dist = vec![usize::MAX; size * size];
    let mut queue = std::collections::VecDeque::new();
    dist[from.0 * size + from.1] = 0;
    queue.push_back(from);
    while let Some((r, c)) = queue.pop_front() {
        if (r, c) == to {
            return Some(dist[r * size + c]);
        }
        let d = dist[r * size + c];
        let next = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in next {
            if nr < size && nc < size && grid[nr * size + nc] == Value(0) && dist[nr * size + nc] == usize::MAX {
                dist[nr * size + nc] = d + 1;
                queue.push_back((nr, nc));
            }
        }
    }
    None
}
