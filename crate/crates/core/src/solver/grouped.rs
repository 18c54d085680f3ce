//! Problems whose residuals split into groups that each depend on the shared
//! parameters plus one private block (bundle adjustment: intrinsics + one
//! pose per frame).

use nalgebra::{DMatrix, DVector};

use super::{BlockJacobian, Jacobian, LeastSquaresProblem, RowBlock, SolverError};

/// Residuals of one group and their derivatives.
#[derive(Clone, Debug)]
pub struct GroupLinearization {
    pub residuals: DVector<f64>,
    pub global: DMatrix<f64>,
    pub local: DMatrix<f64>,
}

pub trait GroupedProblem {
    fn global_dim(&self) -> usize;
    fn local_dim(&self) -> usize;
    fn num_groups(&self) -> usize;
    fn group_residuals(&self, group: usize, global: &[f64], local: &[f64]) -> Result<DVector<f64>, SolverError>;
    fn group_linearize(&self, group: usize, global: &[f64], local: &[f64]) -> Result<GroupLinearization, SolverError>;
}

/// Which groups enter the stacked problem, in which order, and which local
/// parameter block each one uses.
///
/// A group may appear several times (resampling with replacement); all copies
/// share one parameter block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupLayout {
    /// Group index of each stacked row block.
    pub groups: Vec<usize>,
    /// Parameter block of each stacked row block.
    pub blocks: Vec<usize>,
    /// Group index owning each parameter block.
    pub block_groups: Vec<usize>,
}

impl GroupLayout {
    /// Every group once, in order.
    pub fn identity(n: usize) -> Self {
        Self { groups: (0..n).collect(), blocks: (0..n).collect(), block_groups: (0..n).collect() }
    }

    /// Row blocks in the order given by `draw`; distinct groups get parameter
    /// blocks in order of first appearance.
    pub fn resampled(draw: &[usize]) -> Self {
        let mut block_of = std::collections::HashMap::new();
        let mut block_groups = Vec::new();
        let blocks = draw
            .iter()
            .map(|&g| {
                *block_of.entry(g).or_insert_with(|| {
                    block_groups.push(g);
                    block_groups.len() - 1
                })
            })
            .collect();
        Self { groups: draw.to_vec(), blocks, block_groups }
    }

    pub fn num_blocks(&self) -> usize {
        self.block_groups.len()
    }
}

/// Stacks a [`GroupedProblem`] into a least-squares problem over
/// `[global, block_0, block_1, ...]`.
pub struct GroupedLeastSquares<'a, P: ?Sized> {
    pub problem: &'a P,
    pub layout: GroupLayout,
}

impl<'a, P: GroupedProblem + ?Sized> GroupedLeastSquares<'a, P> {
    pub fn new(problem: &'a P) -> Self {
        Self { problem, layout: GroupLayout::identity(problem.num_groups()) }
    }

    pub fn with_layout(problem: &'a P, layout: GroupLayout) -> Self {
        Self { problem, layout }
    }

    fn split<'x>(&self, x: &'x DVector<f64>, block: usize) -> (&'x [f64], &'x [f64]) {
        let g = self.problem.global_dim();
        let l = self.problem.local_dim();
        let s = x.as_slice();
        (&s[..g], &s[g + l * block..g + l * (block + 1)])
    }
}

impl<P: GroupedProblem + ?Sized> LeastSquaresProblem for GroupedLeastSquares<'_, P> {
    fn num_params(&self) -> usize {
        self.problem.global_dim() + self.problem.local_dim() * self.layout.num_blocks()
    }

    fn residuals(&self, x: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
        let mut out = Vec::new();
        for (&grp, &blk) in self.layout.groups.iter().zip(&self.layout.blocks) {
            let (g, l) = self.split(x, blk);
            out.extend_from_slice(self.problem.group_residuals(grp, g, l)?.as_slice());
        }
        Ok(DVector::from_vec(out))
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<(DVector<f64>, Jacobian), SolverError> {
        let mut res = Vec::new();
        let mut rows = Vec::with_capacity(self.layout.groups.len());
        for (&grp, &blk) in self.layout.groups.iter().zip(&self.layout.blocks) {
            let (g, l) = self.split(x, blk);
            let lin = self.problem.group_linearize(grp, g, l)?;
            res.extend_from_slice(lin.residuals.as_slice());
            rows.push(RowBlock { global: lin.global, local: lin.local, block: blk });
        }
        let jac = BlockJacobian {
            global_dim: self.problem.global_dim(),
            local_dim: self.problem.local_dim(),
            num_blocks: self.layout.num_blocks(),
            rows,
        };
        Ok((DVector::from_vec(res), Jacobian::Block(jac)))
    }
}
