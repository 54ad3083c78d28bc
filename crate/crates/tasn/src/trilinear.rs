//! Trilinear attention: turning convolutional feature maps into attention
//! maps by mixing channels according to their spatial relationship.
//!
//! With the feature maps flattened to a matrix `X` of shape `c x hw`, the
//! basic trilinear product is `(X X^T) X`: the Gram matrix `X X^T` scores how
//! strongly each pair of channels co-activates, and multiplying back into `X`
//! redistributes every channel toward its related ones. The default variant
//! normalizes twice, `N(N(X) X^T) X`, where `N` is a row softmax: first over
//! spatial positions (each channel becomes a distribution over locations),
//! then over each channel's relation vector (each output channel becomes a
//! convex mix of input channels).

use crate::num::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Non-negative convolutional feature maps, `c` channels of `h x w`.
#[derive(Debug, Clone)]
pub struct FeatureMaps<T> {
    channels: usize,
    height: usize,
    width: usize,
    values: Tensor<T>,
}

impl<T: Real> FeatureMaps<T> {
    /// Wrap a `[c, h, w]` tensor. Values must be non-negative (post-ReLU
    /// contract) with at least 2 channels and 2 spatial positions.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "feature maps must be 3-d, got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if c < 2 || h * w < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "feature maps need c >= 2 and h*w >= 2, got {c}x{h}x{w}"
            )));
        }
        if values.data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain(
                "feature maps must be non-negative".into(),
            ));
        }
        Ok(FeatureMaps {
            channels: c,
            height: h,
            width: w,
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }
}

/// A stack of `c` attention maps of size `h x w`.
#[derive(Debug, Clone)]
pub struct AttentionStack<T> {
    channels: usize,
    height: usize,
    width: usize,
    values: Tensor<T>,
}

impl<T: Real> AttentionStack<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "attention stack must be 3-d, got {s:?}"
            )));
        }
        Ok(AttentionStack {
            channels: s[0],
            height: s[1],
            width: s[2],
            values,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// Borrow one channel as a flat `h*w` slice.
    pub fn channel(&self, i: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.values.data()[i * hw..(i + 1) * hw]
    }
}

/// The ablated attention formulas. `N` is a row softmax; `SnRn` is the
/// library default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// `X` — raw feature maps.
    Raw,
    /// `(X X^T) X` — unnormalized trilinear product.
    Tri,
    /// `(N(X) X^T) X` — spatially normalized first factor.
    SnTri,
    /// `(N(X) N(X)^T) X` — both Gram factors spatially normalized.
    SnSn,
    /// `N((X X^T) X)` — spatial normalization of the final product.
    PostSn,
    /// `N(X X^T) X` — relation-normalized Gram matrix.
    Rn,
    /// `N(N(X) X^T) X` — spatial + relation normalization (default).
    SnRn,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 7] = [
        AttentionVariant::Raw,
        AttentionVariant::Tri,
        AttentionVariant::SnTri,
        AttentionVariant::SnSn,
        AttentionVariant::PostSn,
        AttentionVariant::Rn,
        AttentionVariant::SnRn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Raw => "raw",
            AttentionVariant::Tri => "tri",
            AttentionVariant::SnTri => "sn-tri",
            AttentionVariant::SnSn => "sn-sn",
            AttentionVariant::PostSn => "post-sn",
            AttentionVariant::Rn => "rn",
            AttentionVariant::SnRn => "sn-rn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == s)
    }
}

impl Default for AttentionVariant {
    fn default() -> Self {
        AttentionVariant::SnRn
    }
}

/// Spatial normalization on the tape: row softmax (T=1) over the `hw`
/// positions of each channel of the flattened `c x hw` input.
pub fn spatial_norm_on_tape<T: Real>(tape: &Tape<T>, x_flat: Var) -> Result<Var> {
    tape.softmax_rows(x_flat, T::one())
}

/// Relation matrix on the tape: `R = N(N(X) X^T)`, `c x c`, row-stochastic.
pub fn relation_matrix_on_tape<T: Real>(tape: &Tape<T>, x_flat: Var) -> Result<Var> {
    let sn = spatial_norm_on_tape(tape, x_flat)?;
    let xt = tape.transpose(x_flat)?;
    let gram = tape.matmul(sn, xt)?;
    tape.softmax_rows(gram, T::one())
}

/// Record the chosen attention formula on the tape. `x_flat` must be the
/// `c x hw` view of the feature maps; the result keeps that shape.
pub fn attention_on_tape<T: Real>(
    tape: &Tape<T>,
    x_flat: Var,
    variant: AttentionVariant,
) -> Result<Var> {
    let one = T::one();
    match variant {
        AttentionVariant::Raw => Ok(x_flat),
        AttentionVariant::Tri => {
            let xt = tape.transpose(x_flat)?;
            let gram = tape.matmul(x_flat, xt)?;
            tape.matmul(gram, x_flat)
        }
        AttentionVariant::SnTri => {
            let sn = tape.softmax_rows(x_flat, one)?;
            let xt = tape.transpose(x_flat)?;
            let gram = tape.matmul(sn, xt)?;
            tape.matmul(gram, x_flat)
        }
        AttentionVariant::SnSn => {
            let sn = tape.softmax_rows(x_flat, one)?;
            let snt = tape.transpose(sn)?;
            let gram = tape.matmul(sn, snt)?;
            tape.matmul(gram, x_flat)
        }
        AttentionVariant::PostSn => {
            let xt = tape.transpose(x_flat)?;
            let gram = tape.matmul(x_flat, xt)?;
            let tri = tape.matmul(gram, x_flat)?;
            tape.softmax_rows(tri, one)
        }
        AttentionVariant::Rn => {
            let xt = tape.transpose(x_flat)?;
            let gram = tape.matmul(x_flat, xt)?;
            let rel = tape.softmax_rows(gram, one)?;
            tape.matmul(rel, x_flat)
        }
        AttentionVariant::SnRn => {
            let rel = relation_matrix_on_tape(tape, x_flat)?;
            tape.matmul(rel, x_flat)
        }
    }
}

fn flat_view<T: Real>(x: &FeatureMaps<T>) -> Result<Tensor<T>> {
    x.values()
        .reshaped(vec![x.channels(), x.height() * x.width()])
}

/// Spatial normalization of the feature maps, `c x hw`.
pub fn spatial_norm<T: Real>(x: &FeatureMaps<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let v = tape.constant(flat_view(x)?);
    let out = spatial_norm_on_tape(&tape, v)?;
    Ok(tape.value(out))
}

/// The `c x c` channel-relation matrix `N(N(X) X^T)`.
pub fn relation_matrix<T: Real>(x: &FeatureMaps<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let v = tape.constant(flat_view(x)?);
    let out = relation_matrix_on_tape(&tape, v)?;
    Ok(tape.value(out))
}

/// Compute attention maps for `x` under the chosen variant.
pub fn attention<T: Real>(
    x: &FeatureMaps<T>,
    variant: AttentionVariant,
) -> Result<AttentionStack<T>> {
    let tape = Tape::new();
    let v = tape.constant(flat_view(x)?);
    let out = attention_on_tape(&tape, v, variant)?;
    let m = tape
        .value(out)
        .reshaped(vec![x.channels(), x.height(), x.width()])?;
    AttentionStack::new(m)
}
