//! Fixed simplex equiangular tight frame and the class-to-column allocation ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::numkit::{orthonormal_basis, Matrix, Rng};

/// `K` unit prototypes in `R^d` with pairwise inner product `−1/(K−1)`.
///
/// The prototype matrix is frozen at construction; nothing in the crate mutates it.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfFrame {
    dim: usize,
    count: usize,
    seed: u64,
    prototypes: Matrix,
}

impl EtfFrame {
    /// Builds `P = √(K/(K−1)) · U (I − 11ᵀ/K)` from a random orthonormal `U ∈ R^{d×K}` and
    /// renormalizes each column to unit length.
    pub fn build(dim: usize, count: usize, seed: u64) -> Result<Self> {
        if count < 2 {
            return Err(Error::Argument(format!(
                "a simplex frame needs at least 2 prototypes, got {count}"
            )));
        }
        if dim < count {
            return Err(Error::Dimension(format!(
                "frame of {count} prototypes needs dimension ≥ {count}, got {dim}"
            )));
        }
        let mut rng = Rng::new(seed);
        let u = orthonormal_basis(dim, count, &mut rng)?;
        let k = count as f64;
        let scale = (k / (k - 1.0)).sqrt();

        // U(I − 11ᵀ/K) subtracts each row's mean from that row.
        let mut p = u;
        for r in 0..dim {
            let row = p.row_mut(r);
            let mean = row.iter().sum::<f64>() / k;
            for x in row.iter_mut() {
                *x = scale * (*x - mean);
            }
        }
        for c in 0..count {
            let n = (0..dim).map(|r| p[(r, c)] * p[(r, c)]).sum::<f64>().sqrt();
            for r in 0..dim {
                p[(r, c)] /= n;
            }
        }
        Ok(Self {
            dim,
            count,
            seed,
            prototypes: p,
        })
    }

    /// Wraps an externally stored prototype matrix without validating its geometry.
    /// Use [`EtfFrame::gram_deviation`] to check it.
    pub fn from_parts(seed: u64, prototypes: Matrix) -> Result<Self> {
        let (dim, count) = prototypes.shape();
        if count < 2 || dim == 0 {
            return Err(Error::Dimension(format!("stored frame has shape {dim}x{count}")));
        }
        Ok(Self {
            dim,
            count,
            seed,
            prototypes,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The `d×K` prototype matrix.
    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn prototype(&self, column: usize) -> Vec<f64> {
        self.prototypes.col(column)
    }

    /// Prototypes as rows (`K×d`), convenient for per-sample lookups.
    pub fn prototype_rows(&self) -> Matrix {
        self.prototypes.transpose()
    }

    pub fn gram(&self) -> Matrix {
        self.prototypes
            .t_matmul(&self.prototypes)
            .expect("square by construction")
    }

    /// `max |PᵀP − ideal_gram(K)|`.
    pub fn gram_deviation(&self) -> f64 {
        self.gram()
            .max_abs_diff(&ideal_gram(self.count).expect("K ≥ 2"))
            .expect("same shape")
    }

    /// Euclidean norm of `Σ_k p_k`.
    pub fn centroid_norm(&self) -> f64 {
        (0..self.dim)
            .map(|r| self.prototypes.row(r).iter().sum::<f64>().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Writes the frame as CSV: a `d,k,seed` header and value line followed by `d` rows of `K`
    /// prototype coordinates, each printed with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "d,k,seed")?;
        writeln!(w, "{},{},{}", self.dim, self.count, self.seed)?;
        for r in 0..self.dim {
            let line: Vec<String> = self.prototypes.row(r).iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(u64, String)> {
            match lines.next() {
                Some((i, line)) => Ok((i as u64 + 1, line?)),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("unexpected end of frame file, expected {what}"),
                }),
            }
        };
        let (ln, header) = next("header")?;
        if header.trim() != "d,k,seed" {
            return Err(Error::Parse {
                line: ln,
                message: format!("expected header `d,k,seed`, found `{header}`"),
            });
        }
        let (ln, meta) = next("frame shape")?;
        let fields: Vec<&str> = meta.trim().split(',').collect();
        let parse_err = |message: String| Error::Parse { line: ln, message };
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let dim: usize = fields[0].parse().map_err(|e| parse_err(format!("bad d: {e}")))?;
        let count: usize = fields[1].parse().map_err(|e| parse_err(format!("bad k: {e}")))?;
        let seed: u64 = fields[2].parse().map_err(|e| parse_err(format!("bad seed: {e}")))?;
        let mut data = Vec::with_capacity(dim * count);
        for _ in 0..dim {
            let (ln, row) = next("prototype row")?;
            let vals: Vec<&str> = row.trim().split(',').collect();
            if vals.len() != count {
                return Err(Error::DimensionMismatch {
                    line: ln,
                    expected: count,
                    found: vals.len(),
                });
            }
            for v in vals {
                data.push(v.parse::<f64>().map_err(|e| Error::Parse {
                    line: ln,
                    message: format!("bad value `{v}`: {e}"),
                })?);
            }
        }
        Self::from_parts(seed, Matrix::from_vec(dim, count, data)?)
    }
}

/// Target Gram matrix of a `K`-simplex ETF: ones on the diagonal, `−1/(K−1)` elsewhere.
pub fn ideal_gram(count: usize) -> Result<Matrix> {
    if count < 2 {
        return Err(Error::Argument(format!("ideal Gram needs K ≥ 2, got {count}")));
    }
    let off = -1.0 / (count as f64 - 1.0);
    let mut g = Matrix::zeros(count, count);
    for i in 0..count {
        for j in 0..count {
            g[(i, j)] = if i == j { 1.0 } else { off };
        }
    }
    Ok(g)
}

/// Which frame column each class owns, and which columns are still free.
///
/// Columns are handed out once and never move.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationLedger {
    assignments: BTreeMap<usize, usize>,
    free: BTreeSet<usize>,
}

impl AllocationLedger {
    pub fn new(capacity: usize) -> Self {
        Self {
            assignments: BTreeMap::new(),
            free: (0..capacity).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.assignments.len() + self.free.len()
    }

    /// Binds `class` to the smallest free column.
    pub fn assign(&mut self, class: usize) -> Result<usize> {
        if self.assignments.contains_key(&class) {
            return Err(Error::DuplicateClass(class));
        }
        let column = *self.free.first().ok_or(Error::Capacity {
            requested: 1,
            available: 0,
        })?;
        self.free.remove(&column);
        self.assignments.insert(class, column);
        Ok(column)
    }

    /// Binds `class` to a specific free column.
    pub fn assign_to(&mut self, class: usize, column: usize) -> Result<()> {
        if self.assignments.contains_key(&class) {
            return Err(Error::DuplicateClass(class));
        }
        if !self.free.remove(&column) {
            return Err(Error::ColumnTaken(column));
        }
        self.assignments.insert(class, column);
        Ok(())
    }

    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.assignments.get(&class).copied()
    }

    pub fn require(&self, class: usize) -> Result<usize> {
        self.column_of(class).ok_or(Error::UnassignedClass(class))
    }

    pub fn assignments(&self) -> &BTreeMap<usize, usize> {
        &self.assignments
    }

    /// Free columns in ascending order.
    pub fn free(&self) -> Vec<usize> {
        self.free.iter().copied().collect()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn is_free(&self, column: usize) -> bool {
        self.free.contains(&column)
    }
}
