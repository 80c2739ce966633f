//! Block-piecewise-Lipschitz directed graphons and their sampled
//! interaction matrices.
//!
//! Blocks are right-closed: with boundaries `0 = a_0 < a_1 < ... < a_N = 1`
//! the k-th block is `(a_{k-1}, a_k]`, and the first block also contains 0.
//! This matches the particle positions `i/n`, which are the right endpoints
//! of the cells `((i-1)/n, i/n]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Coefficients of `G(u, v) = intercept + u_coef * u + v_coef * v` on one
/// block rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineBlock {
    pub intercept: f64,
    pub u_coef: f64,
    pub v_coef: f64,
}

impl AffineBlock {
    #[inline]
    fn at(&self, u: f64, v: f64) -> f64 {
        self.intercept + self.u_coef * u + self.v_coef * v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GraphonKind {
    Constant(f64),
    /// N x N values, one per block rectangle.
    BlockConstant(Vec<Vec<f64>>),
    /// `G(u, v) = u v`
    Product,
    /// `G(u, v) = min(u, v)`
    Min,
    BlockAffine(Vec<Vec<AffineBlock>>),
}

/// Serialized form used in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphonSpec {
    Constant {
        value: f64,
    },
    BlockConstant {
        boundaries: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    Product,
    Min,
    BlockAffine {
        boundaries: Vec<f64>,
        blocks: Vec<Vec<AffineBlock>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphonSpec", into = "GraphonSpec")]
pub struct Graphon {
    boundaries: Vec<f64>,
    kind: GraphonKind,
    lipschitz: f64,
}

fn check_unit(u: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {u} is outside [0, 1]")))
    }
}

fn check_boundaries(b: &[f64]) -> Result<()> {
    if b.len() < 2 || b[0] != 0.0 || *b.last().unwrap() != 1.0 {
        return Err(Error::Domain(
            "block boundaries must start at 0 and end at 1".into(),
        ));
    }
    if b.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain(
            "block boundaries must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Index of the right-closed block containing `u`.
pub fn block_of(boundaries: &[f64], u: f64) -> usize {
    boundaries[1..]
        .partition_point(|&a| a < u)
        .min(boundaries.len() - 2)
}

impl Graphon {
    pub fn constant(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Domain(format!(
                "constant graphon value {value} is outside [0, 1]"
            )));
        }
        Ok(Self {
            boundaries: vec![0.0, 1.0],
            kind: GraphonKind::Constant(value),
            lipschitz: 0.0,
        })
    }

    pub fn block_constant(boundaries: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        check_boundaries(&boundaries)?;
        let nb = boundaries.len() - 1;
        if values.len() != nb || values.iter().any(|r| r.len() != nb) {
            return Err(Error::Domain(format!(
                "block values must be a {nb} x {nb} matrix"
            )));
        }
        if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("block values must lie in [0, 1]".into()));
        }
        Ok(Self {
            boundaries,
            kind: GraphonKind::BlockConstant(values),
            lipschitz: 0.0,
        })
    }

    pub fn product() -> Self {
        Self {
            boundaries: vec![0.0, 1.0],
            kind: GraphonKind::Product,
            lipschitz: 1.0,
        }
    }

    pub fn min() -> Self {
        Self {
            boundaries: vec![0.0, 1.0],
            kind: GraphonKind::Min,
            lipschitz: 1.0,
        }
    }

    pub fn block_affine(boundaries: Vec<f64>, blocks: Vec<Vec<AffineBlock>>) -> Result<Self> {
        check_boundaries(&boundaries)?;
        let nb = boundaries.len() - 1;
        if blocks.len() != nb || blocks.iter().any(|r| r.len() != nb) {
            return Err(Error::Domain(format!(
                "affine blocks must form a {nb} x {nb} matrix"
            )));
        }
        let mut lip: f64 = 0.0;
        for (i, row) in blocks.iter().enumerate() {
            for (j, blk) in row.iter().enumerate() {
                // affine, so the extremes sit at the rectangle corners
                for u in [boundaries[i], boundaries[i + 1]] {
                    for v in [boundaries[j], boundaries[j + 1]] {
                        let g = blk.at(u, v);
                        if !(-1e-12..=1.0 + 1e-12).contains(&g) {
                            return Err(Error::Domain(format!(
                                "affine block ({i}, {j}) leaves [0, 1] at ({u}, {v}): {g}"
                            )));
                        }
                    }
                }
                lip = lip.max(blk.u_coef.abs()).max(blk.v_coef.abs());
            }
        }
        Ok(Self {
            boundaries,
            kind: GraphonKind::BlockAffine(blocks),
            lipschitz: lip,
        })
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn kind(&self) -> &GraphonKind {
        &self.kind
    }

    /// Per-block Lipschitz constant K_G of the closed-form family member.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn block_of(&self, u: f64) -> usize {
        block_of(&self.boundaries, u)
    }

    /// Constant on every block rectangle (enables aggregated sums).
    pub fn is_block_constant(&self) -> bool {
        matches!(
            self.kind,
            GraphonKind::Constant(_) | GraphonKind::BlockConstant(_)
        )
    }

    /// Block value table for piecewise-constant graphons.
    pub fn block_values(&self) -> Option<Vec<Vec<f64>>> {
        match &self.kind {
            GraphonKind::Constant(c) => Some(vec![vec![*c]]),
            GraphonKind::BlockConstant(v) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn eval(&self, u: f64, v: f64) -> Result<f64> {
        check_unit(u, "u")?;
        check_unit(v, "v")?;
        Ok(self.eval_unchecked(u, v))
    }

    /// `eval` without the range check, for hot loops over known-valid grids.
    #[inline]
    pub fn eval_unchecked(&self, u: f64, v: f64) -> f64 {
        match &self.kind {
            GraphonKind::Constant(c) => *c,
            GraphonKind::BlockConstant(vals) => vals[self.block_of(u)][self.block_of(v)],
            GraphonKind::Product => u * v,
            GraphonKind::Min => u.min(v),
            GraphonKind::BlockAffine(blocks) => {
                blocks[self.block_of(u)][self.block_of(v)].at(u, v).clamp(0.0, 1.0)
            }
        }
    }

    /// `∫_0^1 G(u, v) dv`, in closed form for every kind.
    pub fn degree(&self, u: f64) -> Result<f64> {
        check_unit(u, "u")?;
        Ok(self.degree_unchecked(u))
    }

    pub fn degree_unchecked(&self, u: f64) -> f64 {
        let b = &self.boundaries;
        match &self.kind {
            GraphonKind::Constant(c) => *c,
            GraphonKind::BlockConstant(vals) => {
                let row = &vals[self.block_of(u)];
                row.iter()
                    .enumerate()
                    .map(|(j, g)| g * (b[j + 1] - b[j]))
                    .sum()
            }
            GraphonKind::Product => 0.5 * u,
            GraphonKind::Min => u - 0.5 * u * u,
            GraphonKind::BlockAffine(blocks) => {
                let row = &blocks[self.block_of(u)];
                row.iter()
                    .enumerate()
                    .map(|(j, blk)| {
                        let (lo, hi) = (b[j], b[j + 1]);
                        (blk.intercept + blk.u_coef * u) * (hi - lo)
                            + blk.v_coef * 0.5 * (hi * hi - lo * lo)
                    })
                    .sum()
            }
        }
    }

    /// Largest `|ΔG| / (|Δu| + |Δv|)` over all pairs of grid points that
    /// share a block rectangle. Must not exceed [`Graphon::lipschitz`].
    pub fn check_block_lipschitz(&self, grid_step: f64) -> Result<f64> {
        let min_width = self
            .boundaries
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if !(grid_step > 0.0 && grid_step < min_width) {
            return Err(Error::Domain(format!(
                "grid step {grid_step} must lie in (0, {min_width})"
            )));
        }
        let k = (1.0 / grid_step).floor() as usize;
        let grid: Vec<f64> = (0..=k).map(|i| (i as f64 * grid_step).min(1.0)).collect();
        // group grid points by block so only same-block pairs are visited
        let nb = self.num_blocks();
        let mut by_block: Vec<Vec<f64>> = vec![Vec::new(); nb];
        for &u in &grid {
            by_block[self.block_of(u)].push(u);
        }
        let mut worst: f64 = 0.0;
        for bu in &by_block {
            for bv in &by_block {
                let pts: Vec<(f64, f64, f64)> = bu
                    .iter()
                    .flat_map(|&u| bv.iter().map(move |&v| (u, v)))
                    .map(|(u, v)| (u, v, self.eval_unchecked(u, v)))
                    .collect();
                for (a, p) in pts.iter().enumerate() {
                    for q in &pts[a + 1..] {
                        let dist = (p.0 - q.0).abs() + (p.1 - q.1).abs();
                        if dist > 0.0 {
                            worst = worst.max((p.2 - q.2).abs() / dist);
                        }
                    }
                }
            }
        }
        Ok(worst)
    }
}

impl TryFrom<GraphonSpec> for Graphon {
    type Error = Error;

    fn try_from(spec: GraphonSpec) -> Result<Self> {
        match spec {
            GraphonSpec::Constant { value } => Graphon::constant(value),
            GraphonSpec::BlockConstant { boundaries, values } => {
                Graphon::block_constant(boundaries, values)
            }
            GraphonSpec::Product => Ok(Graphon::product()),
            GraphonSpec::Min => Ok(Graphon::min()),
            GraphonSpec::BlockAffine { boundaries, blocks } => {
                Graphon::block_affine(boundaries, blocks)
            }
        }
    }
}

impl From<Graphon> for GraphonSpec {
    fn from(g: Graphon) -> Self {
        match g.kind {
            GraphonKind::Constant(value) => GraphonSpec::Constant { value },
            GraphonKind::BlockConstant(values) => GraphonSpec::BlockConstant {
                boundaries: g.boundaries,
                values,
            },
            GraphonKind::Product => GraphonSpec::Product,
            GraphonKind::Min => GraphonSpec::Min,
            GraphonKind::BlockAffine(blocks) => GraphonSpec::BlockAffine {
                boundaries: g.boundaries,
                blocks,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `ξ_ij = G(i/n, j/n)`
    Deterministic,
    /// `ξ_ij ~ Bernoulli(G(i/n, j/n))`, independent over ordered pairs.
    Bernoulli,
}

/// The sampled graphon `ξ^n`. Entries are computed on demand from
/// `(seed, i, j)`, so any entry can be queried without materializing the
/// matrix. Indices are zero-based; particle `i` sits at `u = (i + 1) / n`.
#[derive(Clone, Debug)]
pub struct InteractionMatrix {
    graphon: Graphon,
    n: usize,
    mode: SamplingMode,
    seed: u64,
    undirected: bool,
}

impl InteractionMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn graphon(&self) -> &Graphon {
        &self.graphon
    }

    /// Symmetric Bernoulli sampling (`ξ_ij = ξ_ji`). Off by default.
    pub fn with_undirected(mut self, undirected: bool) -> Self {
        self.undirected = undirected;
        self
    }

    #[inline]
    pub fn position(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.n as f64
    }

    /// Mean interaction weight `G(i/n, j/n)`.
    #[inline]
    pub fn mean_entry(&self, i: usize, j: usize) -> f64 {
        self.graphon
            .eval_unchecked(self.position(i), self.position(j))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let g = self.mean_entry(i, j);
        match self.mode {
            SamplingMode::Deterministic => g,
            SamplingMode::Bernoulli => {
                let (a, b) = if self.undirected && j < i { (j, i) } else { (i, j) };
                let draw = rng::uniform_at(self.seed, &[rng::tag::GRAPH, a as u64, b as u64]);
                if draw < g {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n).map(|j| self.get(i, j)).collect()
    }

    /// Row-major dense copy; rows are built in parallel.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.n)
            .into_par_iter()
            .flat_map_iter(|i| self.row(i))
            .collect()
    }

    /// Block index of every particle together with the block value table,
    /// when the matrix is constant on block rectangles.
    pub fn block_structure(&self) -> Option<(Vec<usize>, Vec<Vec<f64>>)> {
        if self.mode != SamplingMode::Deterministic {
            return None;
        }
        let table = self.graphon.block_values()?;
        let blocks = (0..self.n)
            .map(|i| self.graphon.block_of(self.position(i)))
            .collect();
        Some((blocks, table))
    }
}

pub fn sample_interaction(
    g: &Graphon,
    n: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<InteractionMatrix> {
    if n == 0 {
        return Err(Error::Domain("interaction matrix needs n >= 1".into()));
    }
    Ok(InteractionMatrix {
        graphon: g.clone(),
        n,
        mode,
        seed,
        undirected: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_block() -> Graphon {
        Graphon::block_constant(vec![0.0, 0.5, 1.0], vec![vec![0.9, 0.3], vec![0.3, 0.7]])
            .unwrap()
    }

    fn all_kinds() -> Vec<Graphon> {
        vec![
            Graphon::constant(0.4).unwrap(),
            two_block(),
            Graphon::product(),
            Graphon::min(),
            Graphon::block_affine(
                vec![0.0, 0.3, 1.0],
                vec![
                    vec![
                        AffineBlock { intercept: 0.2, u_coef: 0.5, v_coef: 0.1 },
                        AffineBlock { intercept: 0.9, u_coef: -0.2, v_coef: -0.5 },
                    ],
                    vec![
                        AffineBlock { intercept: 0.1, u_coef: 0.3, v_coef: 0.6 },
                        AffineBlock { intercept: 0.5, u_coef: 0.0, v_coef: 0.0 },
                    ],
                ],
            )
            .unwrap(),
        ]
    }

    #[test]
    fn eval_examples() {
        assert_eq!(Graphon::constant(1.0).unwrap().eval(0.3, 0.9).unwrap(), 1.0);
        assert_eq!(Graphon::product().eval(0.5, 0.5).unwrap(), 0.25);
        assert_eq!(two_block().eval(0.25, 0.75).unwrap(), 0.3);
    }

    #[test]
    fn eval_rejects_out_of_range() {
        assert!(matches!(Graphon::product().eval(1.2, 0.5), Err(Error::Domain(_))));
        assert!(matches!(Graphon::min().eval(0.5, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn blocks_are_right_closed() {
        let g = two_block();
        assert_eq!(g.block_of(0.0), 0);
        assert_eq!(g.block_of(0.5), 0);
        assert_eq!(g.block_of(0.5 + 1e-12), 1);
        assert_eq!(g.block_of(1.0), 1);
    }

    #[test]
    fn degree_examples() {
        assert_eq!(Graphon::constant(1.0).unwrap().degree(0.7).unwrap(), 1.0);
        assert_eq!(Graphon::product().degree(0.5).unwrap(), 0.25);
        assert!((Graphon::min().degree(0.5).unwrap() - 0.375).abs() < 1e-15);
        let g = two_block();
        assert!((g.degree(0.25).unwrap() - 0.6).abs() < 1e-15);
        assert!((g.degree(0.75).unwrap() - 0.5).abs() < 1e-15);
    }

    /// Midpoint rule at step 1e-4 as an independent oracle for `degree`.
    fn midpoint_degree(g: &Graphon, u: f64) -> f64 {
        let k = 10_000;
        let h = 1.0 / k as f64;
        (0..k).map(|i| g.eval_unchecked(u, (i as f64 + 0.5) * h)).sum::<f64>() * h
    }

    #[test]
    fn degree_matches_midpoint_rule() {
        for g in all_kinds() {
            for k in 0..=20 {
                let u = k as f64 / 20.0;
                let d = g.degree(u).unwrap();
                assert!((0.0..=1.0).contains(&d));
                let t = midpoint_degree(&g, u);
                assert!((d - t).abs() < 1e-6, "{:?} u={u}: {d} vs {t}", g.kind());
            }
        }
    }

    #[test]
    fn lipschitz_checks() {
        assert_eq!(Graphon::constant(0.3).unwrap().check_block_lipschitz(0.05).unwrap(), 0.0);
        assert_eq!(two_block().check_block_lipschitz(0.05).unwrap(), 0.0);
        for g in all_kinds() {
            let ratio = g.check_block_lipschitz(0.05).unwrap();
            assert!(ratio <= g.lipschitz() + 1e-12, "{:?}: {ratio}", g.kind());
        }
        // brute-force oracle for the product kernel: |Δ(uv)| <= |Δu| + |Δv|
        let p = Graphon::product().check_block_lipschitz(0.02).unwrap();
        assert!(p <= 1.0 && p > 0.9);
        assert!(two_block().check_block_lipschitz(0.6).is_err());
    }

    #[test]
    fn deterministic_matrix_is_pointwise_eval() {
        for g in all_kinds() {
            let m = sample_interaction(&g, 17, SamplingMode::Deterministic, 0).unwrap();
            let dense = m.to_dense();
            for i in 0..17 {
                for j in 0..17 {
                    let want = g.eval((i + 1) as f64 / 17.0, (j + 1) as f64 / 17.0).unwrap();
                    assert_eq!(dense[i * 17 + j], want);
                }
            }
        }
        let m = sample_interaction(&Graphon::constant(1.0).unwrap(), 4, SamplingMode::Deterministic, 0)
            .unwrap();
        assert!(m.to_dense().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn bernoulli_extremes() {
        for seed in [0, 1, 99] {
            let m = sample_interaction(&Graphon::constant(0.0).unwrap(), 4, SamplingMode::Bernoulli, seed)
                .unwrap();
            assert!(m.to_dense().iter().all(|&x| x == 0.0));
            let m = sample_interaction(&Graphon::constant(1.0).unwrap(), 4, SamplingMode::Bernoulli, seed)
                .unwrap();
            assert!(m.to_dense().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn bernoulli_half_mean_in_wilson_interval() {
        let m = sample_interaction(&Graphon::constant(0.5).unwrap(), 100, SamplingMode::Bernoulli, 2024)
            .unwrap();
        let dense = m.to_dense();
        let ones = dense.iter().filter(|&&x| x == 1.0).count() as f64;
        assert!(dense.iter().all(|&x| x == 0.0 || x == 1.0));
        // Wilson 99% interval for p = 0.5 at N = 10^4
        let (n, z) = (1e4, 2.5758293035489004);
        let p = ones / n;
        let centre = (p + z * z / (2.0 * n)) / (1.0 + z * z / n);
        let half = z / (1.0 + z * z / n) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
        assert!((centre - half..=centre + half).contains(&0.5), "p_hat = {p}");
    }

    #[test]
    fn undirected_flag_symmetrizes() {
        let m = sample_interaction(&Graphon::constant(0.5).unwrap(), 30, SamplingMode::Bernoulli, 5)
            .unwrap()
            .with_undirected(true);
        for i in 0..30 {
            for j in 0..30 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn block_affine_rejects_out_of_range() {
        let bad = Graphon::block_affine(
            vec![0.0, 1.0],
            vec![vec![AffineBlock { intercept: 0.8, u_coef: 0.5, v_coef: 0.0 }]],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn spec_round_trip() {
        for g in all_kinds() {
            let text = serde_json::to_string(&g).unwrap();
            let back: Graphon = serde_json::from_str(&text).unwrap();
            assert_eq!(g, back);
        }
        let parsed: Graphon = serde_json::from_str(
            r#"{"kind": "block_constant", "boundaries": [0, 0.5, 1], "values": [[0.9, 0.3], [0.3, 0.7]]}"#,
        )
        .unwrap();
        assert_eq!(parsed, two_block());
    }

    proptest! {
        #[test]
        fn eval_stays_in_unit_interval(u in 0.0f64..=1.0, v in 0.0f64..=1.0) {
            for g in all_kinds() {
                let x = g.eval(u, v).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn bernoulli_entry_queries_match_dense(seed in any::<u64>(), n in 1usize..24) {
            let g = Graphon::product();
            let m = sample_interaction(&g, n, SamplingMode::Bernoulli, seed).unwrap();
            let again = sample_interaction(&g, n, SamplingMode::Bernoulli, seed).unwrap();
            let dense = m.to_dense();
            prop_assert_eq!(&dense, &again.to_dense());
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(dense[i * n + j], m.get(i, j));
                }
            }
        }
    }
}
