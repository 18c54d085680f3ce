//! Jacobian storage and normal-equation assembly.
//!
//! Bundle-adjustment style problems have one shared parameter block (the
//! intrinsics) and many small local blocks (one pose per frame). Each row
//! block of the Jacobian touches the shared block and exactly one local block,
//! which is what [`BlockJacobian`] stores.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::SolverError;

/// Rows of one residual group: derivatives with respect to the shared block
/// and to the group's local block.
#[derive(Clone, Debug)]
pub struct RowBlock {
    pub global: DMatrix<f64>,
    pub local: DMatrix<f64>,
    /// Index of the local parameter block these rows depend on.
    pub block: usize,
}

impl RowBlock {
    pub fn nrows(&self) -> usize {
        self.global.nrows()
    }
}

/// Block-sparse Jacobian `[G_i | 0 .. L_i .. 0]` stacked over row blocks.
/// Parameter layout: `[global, local_0, local_1, ...]`.
#[derive(Clone, Debug)]
pub struct BlockJacobian {
    pub global_dim: usize,
    pub local_dim: usize,
    pub num_blocks: usize,
    pub rows: Vec<RowBlock>,
}

impl BlockJacobian {
    pub fn nrows(&self) -> usize {
        self.rows.iter().map(RowBlock::nrows).sum()
    }

    pub fn ncols(&self) -> usize {
        self.global_dim + self.local_dim * self.num_blocks
    }

    /// Row offset of each row block within the stacked residual vector.
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.rows.len() + 1);
        let mut acc = 0;
        off.push(0);
        for rb in &self.rows {
            acc += rb.nrows();
            off.push(acc);
        }
        off
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (g, l) = (self.global_dim, self.local_dim);
        let mut m = DMatrix::zeros(self.nrows(), self.ncols());
        let mut row = 0;
        for rb in &self.rows {
            let n = rb.nrows();
            m.view_mut((row, 0), (n, g)).copy_from(&rb.global);
            m.view_mut((row, g + l * rb.block), (n, l)).copy_from(&rb.local);
            row += n;
        }
        m
    }

    pub fn normal_equations(&self, r: &DVector<f64>) -> BlockNormal {
        let (g, l, nb) = (self.global_dim, self.local_dim, self.num_blocks);
        let mut ne = BlockNormal {
            u: DMatrix::zeros(g, g),
            w: vec![DMatrix::zeros(g, l); nb],
            v: vec![DMatrix::zeros(l, l); nb],
            bg: DVector::zeros(g),
            bl: vec![DVector::zeros(l); nb],
        };
        let mut row = 0;
        for rb in &self.rows {
            let n = rb.nrows();
            let ri = r.rows(row, n);
            let b = rb.block;
            ne.u += rb.global.tr_mul(&rb.global);
            ne.w[b] += rb.global.tr_mul(&rb.local);
            ne.v[b] += rb.local.tr_mul(&rb.local);
            ne.bg += rb.global.tr_mul(&ri);
            ne.bl[b] += rb.local.tr_mul(&ri);
            row += n;
        }
        ne
    }

    pub fn tr_mul(&self, r: &DVector<f64>) -> DVector<f64> {
        let (g, l) = (self.global_dim, self.local_dim);
        let mut out = DVector::zeros(self.ncols());
        let mut row = 0;
        for rb in &self.rows {
            let n = rb.nrows();
            let ri = r.rows(row, n);
            let mut og = out.rows_mut(0, g);
            og += rb.global.tr_mul(&ri);
            let mut ol = out.rows_mut(g + l * rb.block, l);
            ol += rb.local.tr_mul(&ri);
            row += n;
        }
        out
    }

    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let (g, l) = (self.global_dim, self.local_dim);
        let mut out = DVector::zeros(self.nrows());
        let xg = x.rows(0, g);
        let mut row = 0;
        for rb in &self.rows {
            let n = rb.nrows();
            let xl = x.rows(g + l * rb.block, l);
            let y = &rb.global * xg + &rb.local * xl;
            out.rows_mut(row, n).copy_from(&y);
            row += n;
        }
        out
    }

    fn scale_rows(&mut self, w: &DVector<f64>) {
        let mut row = 0;
        for rb in &mut self.rows {
            for i in 0..rb.nrows() {
                let s = w[row + i];
                rb.global.row_mut(i).scale_mut(s);
                rb.local.row_mut(i).scale_mut(s);
            }
            row += rb.nrows();
        }
    }
}

/// Jacobian of a least-squares problem.
#[derive(Clone, Debug)]
pub enum Jacobian {
    Dense(DMatrix<f64>),
    Block(BlockJacobian),
}

impl Jacobian {
    pub fn nrows(&self) -> usize {
        match self {
            Jacobian::Dense(m) => m.nrows(),
            Jacobian::Block(b) => b.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Jacobian::Dense(m) => m.ncols(),
            Jacobian::Block(b) => b.ncols(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Jacobian::Dense(m) => m.clone(),
            Jacobian::Block(b) => b.to_dense(),
        }
    }

    /// `J^T J` and `J^T r`.
    pub fn normal_equations(&self, r: &DVector<f64>) -> NormalEquations {
        match self {
            Jacobian::Dense(m) => NormalEquations::Dense { a: m.tr_mul(m), b: m.tr_mul(r) },
            Jacobian::Block(b) => NormalEquations::Block(b.normal_equations(r)),
        }
    }

    pub fn tr_mul(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Jacobian::Dense(m) => m.tr_mul(r),
            Jacobian::Block(b) => b.tr_mul(r),
        }
    }

    pub fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Jacobian::Dense(m) => m * x,
            Jacobian::Block(b) => b.mul(x),
        }
    }

    /// Multiplies row `i` by `w[i]`.
    pub fn scale_rows(&mut self, w: &DVector<f64>) {
        match self {
            Jacobian::Dense(m) => {
                for i in 0..m.nrows() {
                    m.row_mut(i).scale_mut(w[i]);
                }
            }
            Jacobian::Block(b) => b.scale_rows(w),
        }
    }

    /// Squared column norms.
    pub fn column_norms_sq(&self) -> DVector<f64> {
        match self {
            Jacobian::Dense(m) => DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.norm_squared())),
            Jacobian::Block(b) => {
                let mut out = DVector::zeros(b.ncols());
                for rb in &b.rows {
                    for (j, c) in rb.global.column_iter().enumerate() {
                        out[j] += c.norm_squared();
                    }
                    for (j, c) in rb.local.column_iter().enumerate() {
                        out[b.global_dim + b.local_dim * rb.block + j] += c.norm_squared();
                    }
                }
                out
            }
        }
    }
}

/// Block form of `J^T J` and `J^T r`: shared block `U`, coupling `W_j`,
/// local blocks `V_j`.
#[derive(Clone, Debug)]
pub struct BlockNormal {
    pub u: DMatrix<f64>,
    pub w: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub bg: DVector<f64>,
    pub bl: Vec<DVector<f64>>,
}

impl BlockNormal {
    pub fn global_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn local_dim(&self) -> usize {
        self.v.first().map_or(0, |v| v.nrows())
    }

    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let g = self.global_dim();
        let l = self.local_dim();
        let n = g + l * self.v.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        a.view_mut((0, 0), (g, g)).copy_from(&self.u);
        b.rows_mut(0, g).copy_from(&self.bg);
        for (j, (w, v)) in self.w.iter().zip(&self.v).enumerate() {
            let o = g + l * j;
            a.view_mut((0, o), (g, l)).copy_from(w);
            a.view_mut((o, 0), (l, g)).copy_from(&w.transpose());
            a.view_mut((o, o), (l, l)).copy_from(v);
            b.rows_mut(o, l).copy_from(&self.bl[j]);
        }
        (a, b)
    }

    /// Reduced system on the shared block: `S = U - sum W V^-1 W^T` and the
    /// matching right-hand side, with `damping` added to every diagonal.
    /// Also returns the factorized local blocks for back substitution.
    fn reduce(&self, damping: f64) -> Result<(DMatrix<f64>, DVector<f64>, Vec<Cholesky<f64, nalgebra::Dyn>>), SolverError> {
        let g = self.global_dim();
        let mut s = self.u.clone();
        for i in 0..g {
            s[(i, i)] += damping;
        }
        let mut rhs = self.bg.clone();
        let mut factors = Vec::with_capacity(self.v.len());
        for ((w, v), bl) in self.w.iter().zip(&self.v).zip(&self.bl) {
            let mut vd = v.clone();
            for i in 0..vd.nrows() {
                vd[(i, i)] += damping;
            }
            let chol = Cholesky::new(vd).ok_or(SolverError::RankDeficient)?;
            let vinv_wt = chol.solve(&w.transpose());
            s -= w * &vinv_wt;
            rhs -= vinv_wt.tr_mul(bl);
            factors.push(chol);
        }
        Ok((s, rhs, factors))
    }

    fn solve_schur(&self, damping: f64) -> Result<DVector<f64>, SolverError> {
        let g = self.global_dim();
        let l = self.local_dim();
        let (s, rhs, factors) = self.reduce(damping)?;
        let xg = solve_spd(s, &rhs)?;
        let mut x = DVector::zeros(g + l * self.v.len());
        x.rows_mut(0, g).copy_from(&xg);
        for (j, chol) in factors.iter().enumerate() {
            let rhs_j = &self.bl[j] - self.w[j].tr_mul(&xg);
            x.rows_mut(g + l * j, l).copy_from(&chol.solve(&rhs_j));
        }
        Ok(x)
    }

    /// Schur complement of the local blocks, `U - sum W V^-1 W^T`.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>, SolverError> {
        let (s, _, _) = self.reduce(0.0)?;
        Ok(0.5 * (&s + s.transpose()))
    }

    /// Inverse of the Schur complement of the local blocks, i.e. the shared
    /// block of `(J^T J)^-1`.
    pub fn global_marginal_inverse(&self) -> Result<DMatrix<f64>, SolverError> {
        let s = self.schur_complement()?;
        let g = s.nrows();
        let inv = solve_spd_multi(s, &DMatrix::identity(g, g))?;
        Ok(0.5 * (&inv + inv.transpose()))
    }
}

/// `J^T J` and `J^T r` in dense or block form.
#[derive(Clone, Debug)]
pub enum NormalEquations {
    Dense { a: DMatrix<f64>, b: DVector<f64> },
    Block(BlockNormal),
}

impl NormalEquations {
    pub fn dim(&self) -> usize {
        match self {
            NormalEquations::Dense { b, .. } => b.len(),
            NormalEquations::Block(n) => n.global_dim() + n.local_dim() * n.v.len(),
        }
    }

    /// Right-hand side `J^T r`, stacked.
    pub fn rhs(&self) -> DVector<f64> {
        match self {
            NormalEquations::Dense { b, .. } => b.clone(),
            NormalEquations::Block(n) => n.to_dense().1,
        }
    }

    pub fn diagonal_mean(&self) -> f64 {
        let (sum, n) = match self {
            NormalEquations::Dense { a, .. } => (a.diagonal().sum(), a.nrows()),
            NormalEquations::Block(ne) => {
                let s = ne.u.diagonal().sum() + ne.v.iter().map(|v| v.diagonal().sum()).sum::<f64>();
                (s, self.dim())
            }
        };
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Solves `(J^T J + damping I) x = J^T r`. Block systems use the Schur
    /// complement when they have more than `schur_threshold` local blocks.
    pub fn solve(&self, damping: f64, schur_threshold: usize) -> Result<DVector<f64>, SolverError> {
        match self {
            NormalEquations::Dense { a, b } => {
                let mut a = a.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += damping;
                }
                solve_spd(a, b)
            }
            NormalEquations::Block(ne) if ne.v.len() > schur_threshold => ne.solve_schur(damping),
            NormalEquations::Block(ne) => {
                let (mut a, b) = ne.to_dense();
                for i in 0..a.nrows() {
                    a[(i, i)] += damping;
                }
                solve_spd(a, &b)
            }
        }
    }
}

/// Solves a symmetric positive (semi-)definite system with Jacobi-scaled
/// Cholesky, falling back to QR. Singular systems yield `RankDeficient`.
pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, SolverError> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_spd_multi(a, &rhs)?;
    Ok(x.column(0).into_owned())
}

pub(crate) fn solve_spd_multi(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>, SolverError> {
    let n = a.nrows();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        let di = a[(i, i)];
        if !(di > 0.0 && di.is_finite()) {
            return Err(SolverError::RankDeficient);
        }
        d[i] = 1.0 / di.sqrt();
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    let mut rhs = b.clone();
    for i in 0..n {
        rhs.row_mut(i).scale_mut(d[i]);
    }
    let mut x = match Cholesky::new(scaled.clone()) {
        Some(ch) if cholesky_well_conditioned(&ch) => ch.solve(&rhs),
        _ => {
            let qr = scaled.qr();
            let r = qr.r();
            let rmax = r.diagonal().amax();
            if r.diagonal().iter().any(|v| v.abs() <= 1e-13 * rmax) {
                return Err(SolverError::RankDeficient);
            }
            qr.solve(&rhs).ok_or(SolverError::RankDeficient)?
        }
    };
    for i in 0..n {
        x.row_mut(i).scale_mut(d[i]);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::RankDeficient);
    }
    Ok(x)
}

// Unit-diagonal scaled matrix: a tiny pivot means numerical singularity.
fn cholesky_well_conditioned(ch: &Cholesky<f64, nalgebra::Dyn>) -> bool {
    ch.l_dirty().diagonal().iter().all(|&p| p > 1e-7)
}
