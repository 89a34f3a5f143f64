//! Structured linear degradation operators with closed-form pseudo-inverses.
//!
//! An operator `A` maps a `(C, H, W)` image to a lower-dimensional
//! measurement. Each supported operator has full row rank and a
//! pseudo-inverse `A+` that is cheap to apply without ever materializing a
//! matrix:
//!
//! - `avg_pool`: non-overlapping block means with factor `f`; `A+ = f^2 A^T`
//!   replicates each measurement across its block.
//! - `decolorize`: per-pixel channel mean; `A+ = 3 A^T` replicates the gray
//!   value into all three channels.
//! - `identity`: passes through unchanged.
//!
//! Because `A A+ = I`, `A+ A` is the orthogonal projection onto the row
//! space of `A`; `range_project` and `null_project` split an image into the
//! component determined by the measurement and the component the measurement
//! says nothing about.

use std::fmt;

use ndarray::Array3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    AvgPool,
    Decolorize,
    Identity,
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            OperatorKind::AvgPool => "avg_pool",
            OperatorKind::Decolorize => "decolorize",
            OperatorKind::Identity => "identity",
        };
        f.write_str(name)
    }
}

impl OperatorKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "avg_pool" => Some(OperatorKind::AvgPool),
            "decolorize" => Some(OperatorKind::Decolorize),
            "identity" => Some(OperatorKind::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinOpError {
    /// Input image does not match the shape the operator was built for.
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    /// avg_pool requires both spatial dims to be multiples of the factor.
    NonDivisible {
        height: usize,
        width: usize,
        factor: usize,
    },
    /// decolorize is defined on three-channel images only.
    NeedsThreeChannels { got: usize },
    /// The factor is meaningless for this operator kind (or zero).
    BadFactor { kind: OperatorKind, factor: usize },
}

impl fmt::Display for LinOpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinOpError::ShapeMismatch { expected, got } => write!(
                f,
                "image shape {got:?} does not match operator shape {expected:?}"
            ),
            LinOpError::NonDivisible {
                height,
                width,
                factor,
            } => write!(
                f,
                "spatial dims {height}x{width} are not divisible by pooling factor {factor}"
            ),
            LinOpError::NeedsThreeChannels { got } => {
                write!(f, "decolorize needs a 3-channel image, got {got} channels")
            }
            LinOpError::BadFactor { kind, factor } => {
                write!(f, "factor {factor} is invalid for operator {kind}")
            }
        }
    }
}

impl std::error::Error for LinOpError {}

/// A fixed-shape degradation operator. Construct via [`make_operator`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegradationOperator {
    kind: OperatorKind,
    factor: usize,
    in_shape: (usize, usize, usize),
    out_shape: (usize, usize, usize),
}

/// Builds an operator for images of shape `in_shape = (C, H, W)`.
///
/// `factor` is the pooling block size for `avg_pool` and must be `1` for
/// the other kinds, so a stray config value cannot silently change meaning.
pub fn make_operator(
    kind: OperatorKind,
    in_shape: (usize, usize, usize),
    factor: usize,
) -> Result<DegradationOperator, LinOpError> {
    let (c, h, w) = in_shape;
    let out_shape = match kind {
        OperatorKind::AvgPool => {
            if factor == 0 {
                return Err(LinOpError::BadFactor { kind, factor });
            }
            if h % factor != 0 || w % factor != 0 {
                return Err(LinOpError::NonDivisible {
                    height: h,
                    width: w,
                    factor,
                });
            }
            (c, h / factor, w / factor)
        }
        OperatorKind::Decolorize => {
            if factor != 1 {
                return Err(LinOpError::BadFactor { kind, factor });
            }
            if c != 3 {
                return Err(LinOpError::NeedsThreeChannels { got: c });
            }
            (1, h, w)
        }
        OperatorKind::Identity => {
            if factor != 1 {
                return Err(LinOpError::BadFactor { kind, factor });
            }
            in_shape
        }
    };
    Ok(DegradationOperator {
        kind,
        factor,
        in_shape,
        out_shape,
    })
}

impl DegradationOperator {
    pub fn kind(&self) -> OperatorKind {
        self.kind
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn in_shape(&self) -> (usize, usize, usize) {
        self.in_shape
    }

    pub fn out_shape(&self) -> (usize, usize, usize) {
        self.out_shape
    }

    /// Flattened input dimensionality `C*H*W`.
    pub fn in_dim(&self) -> usize {
        let (c, h, w) = self.in_shape;
        c * h * w
    }

    /// Flattened measurement dimensionality.
    pub fn out_dim(&self) -> usize {
        let (c, h, w) = self.out_shape;
        c * h * w
    }

    fn check_in(&self, x: &Array3<f64>) -> Result<(), LinOpError> {
        if x.dim() != self.in_shape {
            return Err(LinOpError::ShapeMismatch {
                expected: self.in_shape,
                got: x.dim(),
            });
        }
        Ok(())
    }

    fn check_out(&self, y: &Array3<f64>) -> Result<(), LinOpError> {
        if y.dim() != self.out_shape {
            return Err(LinOpError::ShapeMismatch {
                expected: self.out_shape,
                got: y.dim(),
            });
        }
        Ok(())
    }

    /// Applies `A`.
    pub fn apply(&self, x: &Array3<f64>) -> Result<Array3<f64>, LinOpError> {
        self.check_in(x)?;
        let y = match self.kind {
            OperatorKind::AvgPool => {
                let (c, ho, wo) = self.out_shape;
                let f = self.factor;
                let norm = 1.0 / (f * f) as f64;
                Array3::from_shape_fn((c, ho, wo), |(ci, i, j)| {
                    let mut acc = 0.0;
                    for a in 0..f {
                        for b in 0..f {
                            acc += x[[ci, i * f + a, j * f + b]];
                        }
                    }
                    acc * norm
                })
            }
            OperatorKind::Decolorize => {
                let (_, h, w) = self.in_shape;
                Array3::from_shape_fn((1, h, w), |(_, i, j)| {
                    (x[[0, i, j]] + x[[1, i, j]] + x[[2, i, j]]) / 3.0
                })
            }
            OperatorKind::Identity => x.clone(),
        };
        Ok(y)
    }

    /// Applies the Moore-Penrose pseudo-inverse `A+`.
    ///
    /// For both structured kinds `A` has full row rank with orthogonal rows
    /// of equal norm, so `A+` reduces to a scaled transpose: replication of
    /// each measurement across the pixels it averaged.
    pub fn apply_pinv(&self, y: &Array3<f64>) -> Result<Array3<f64>, LinOpError> {
        self.check_out(y)?;
        let x = match self.kind {
            OperatorKind::AvgPool => {
                let (c, h, w) = self.in_shape;
                let f = self.factor;
                Array3::from_shape_fn((c, h, w), |(ci, i, j)| y[[ci, i / f, j / f]])
            }
            OperatorKind::Decolorize => {
                let (_, h, w) = self.in_shape;
                Array3::from_shape_fn((3, h, w), |(_, i, j)| y[[0, i, j]])
            }
            OperatorKind::Identity => y.clone(),
        };
        Ok(x)
    }

    /// Orthogonal projection `A+ A x` onto the subspace the measurement
    /// determines.
    pub fn range_project(&self, x: &Array3<f64>) -> Result<Array3<f64>, LinOpError> {
        self.apply_pinv(&self.apply(x)?)
    }

    /// Complementary projection `(I - A+ A) x`: the content the measurement
    /// carries no information about.
    pub fn null_project(&self, x: &Array3<f64>) -> Result<Array3<f64>, LinOpError> {
        let range = self.range_project(x)?;
        Ok(x - &range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn avg_pool_block_means() {
        let op = make_operator(OperatorKind::AvgPool, (1, 2, 4), 2).unwrap();
        let x = arr3(&[[[1.0, 3.0, 10.0, 20.0], [5.0, 7.0, 30.0, 40.0]]]);
        let y = op.apply(&x).unwrap();
        assert_eq!(y, arr3(&[[[4.0, 25.0]]]));
        assert_eq!(op.out_shape(), (1, 1, 2));
    }

    #[test]
    fn avg_pool_pinv_is_replication() {
        // For one 2x2 block the operator is the row [1/4, 1/4, 1/4, 1/4];
        // the pseudo-inverse of a row a^T is a / |a|^2, here 4 a = all-ones,
        // i.e. plain replication of the block mean.
        let op = make_operator(OperatorKind::AvgPool, (1, 2, 2), 2).unwrap();
        let y = arr3(&[[[0.7]]]);
        let up = op.apply_pinv(&y).unwrap();
        assert_eq!(up, arr3(&[[[0.7, 0.7], [0.7, 0.7]]]));
    }

    #[test]
    fn decolorize_uniform_mean_and_replication() {
        let op = make_operator(OperatorKind::Decolorize, (3, 1, 2), 1).unwrap();
        let x = arr3(&[[[0.9, 0.3]], [[0.5, 0.3]], [[0.1, 0.3]]]);
        let y = op.apply(&x).unwrap();
        assert!((y[[0, 0, 0]] - 0.5).abs() < 1e-15);
        assert!((y[[0, 0, 1]] - 0.3).abs() < 1e-15);
        let up = op.apply_pinv(&y).unwrap();
        for c in 0..3 {
            assert!((up[[c, 0, 0]] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_round_trips() {
        let op = make_operator(OperatorKind::Identity, (3, 4, 4), 1).unwrap();
        let x = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c * 16 + i * 4 + j) as f64);
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.apply_pinv(&x).unwrap(), x);
        assert_eq!(op.range_project(&x).unwrap(), x);
        let null = op.null_project(&x).unwrap();
        assert!(null.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_divisible_dims() {
        let err = make_operator(OperatorKind::AvgPool, (3, 5, 8), 2).unwrap_err();
        assert_eq!(
            err,
            LinOpError::NonDivisible {
                height: 5,
                width: 8,
                factor: 2
            }
        );
    }

    #[test]
    fn rejects_decolorize_without_three_channels() {
        let err = make_operator(OperatorKind::Decolorize, (1, 4, 4), 1).unwrap_err();
        assert_eq!(err, LinOpError::NeedsThreeChannels { got: 1 });
    }

    #[test]
    fn rejects_factor_for_non_pooling_kinds() {
        assert!(make_operator(OperatorKind::Identity, (3, 4, 4), 2).is_err());
        assert!(make_operator(OperatorKind::Decolorize, (3, 4, 4), 3).is_err());
        assert!(make_operator(OperatorKind::AvgPool, (3, 4, 4), 0).is_err());
    }

    #[test]
    fn apply_rejects_wrong_shape() {
        let op = make_operator(OperatorKind::AvgPool, (3, 8, 8), 2).unwrap();
        let x = Array3::zeros((3, 8, 6));
        match op.apply(&x).unwrap_err() {
            LinOpError::ShapeMismatch { expected, got } => {
                assert_eq!(expected, (3, 8, 8));
                assert_eq!(got, (3, 8, 6));
            }
            other => panic!("unexpected error {other:?}"),
        }
        let y = Array3::zeros((3, 8, 8));
        assert!(op.apply_pinv(&y).is_err());
    }

    #[test]
    fn operator_kind_parse_round_trip() {
        for kind in [
            OperatorKind::AvgPool,
            OperatorKind::Decolorize,
            OperatorKind::Identity,
        ] {
            assert_eq!(OperatorKind::parse(&kind.to_string()), Some(kind));
        }
        assert_eq!(OperatorKind::parse("blur"), None);
    }
}
