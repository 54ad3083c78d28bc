//! Attention-guided non-uniform image sampling.
//!
//! The attention map acts as a probability mass function over the image:
//! it is reduced to one marginal weight vector per axis (max or sum
//! decomposition), each marginal is integrated into a piecewise-linear CDF,
//! and inverse-transform sampling of that CDF places the output pixel grid.
//! Regions with high attention receive more sampling points; because the two
//! axes are warped independently the mapping is monotone and fold-free.
//!
//! Convention: axis `x` runs over columns (width), axis `y` over rows
//! (height). Pixel centers sit at integer coordinates, so pixel `k` covers
//! `[k - 0.5, k + 0.5)`; under constant attention the machinery reduces
//! exactly to a standard bilinear resize.

use rand::Rng;

use crate::num::Real;
use crate::tensor::{Result, Tensor, TensorError};
use crate::trilinear::AttentionStack;

/// A grayscale or RGB image with planar float pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "image must be at least 2x2, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(TensorError::ShapeMismatch(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(TensorError::ShapeMismatch(format!(
                "pixel count {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(TensorError::Domain(
                "image values must lie in [0, 1]".into(),
            ));
        }
        Ok(ImageBuffer {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }
}

/// A single non-negative attention map.
#[derive(Debug, Clone)]
pub struct AttentionMap<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(TensorError::ShapeMismatch(format!(
                "attention map {height}x{width} vs {} values",
                data.len()
            )));
        }
        if data.iter().any(|&v| v < T::zero()) {
            return Err(TensorError::Domain(
                "attention map values must be non-negative".into(),
            ));
        }
        Ok(AttentionMap {
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "attention map tensor must be 2-d, got {s:?}"
            )));
        }
        Self::new(s[0], s[1], t.data().to_vec())
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Columns (width).
    X,
    /// Rows (height).
    Y,
}

/// How a 2-d attention map is reduced to per-axis marginals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Decomposition {
    /// Per-axis maximum (default; robust to mass spread along the other axis).
    #[default]
    Max,
    /// Per-axis sum.
    Sum,
}

impl Decomposition {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max" => Some(Decomposition::Max),
            "sum" => Some(Decomposition::Sum),
            _ => None,
        }
    }
}

/// How the detail branch picks one channel out of the attention stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionStrategy {
    /// Uniform over channels.
    #[default]
    Random,
    /// Sample with probability proportional to each channel's total response.
    ResponseRanked,
    /// Always the given channel.
    Fixed(usize),
}

/// Monotone piecewise-linear integral of one marginal: `n + 1` knot values
/// with `F(0) = 0`, linear between integer knots.
#[derive(Debug, Clone)]
pub struct MarginalCdf<T> {
    axis: Axis,
    knots: Vec<T>,
}

impl<T: Real> MarginalCdf<T> {
    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Number of marginal bins (`knots.len() - 1`).
    pub fn bins(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn total(&self) -> T {
        *self.knots.last().unwrap()
    }
}

/// Source coordinates realizing the warp: one fractional row coordinate per
/// output row and one column coordinate per output column.
#[derive(Debug, Clone)]
pub struct WarpGrid<T> {
    rows: Vec<T>,
    cols: Vec<T>,
}

impl<T: Real> WarpGrid<T> {
    /// Validates monotonicity and the `[-0.5, dim - 0.5]` coordinate range
    /// against the source image dimensions.
    pub fn new(rows: Vec<T>, cols: Vec<T>, src_h: usize, src_w: usize) -> Result<Self> {
        let half = T::from_f64_lossy(0.5);
        for (coords, dim, what) in [(&rows, src_h, "row"), (&cols, src_w, "column")] {
            let hi = T::from_usize_lossy(dim) - half;
            for pair in coords.windows(2) {
                if pair[1] < pair[0] {
                    return Err(TensorError::Domain(format!(
                        "{what} coordinates must be non-decreasing"
                    )));
                }
            }
            if coords.iter().any(|&c| c < -half || c > hi) {
                return Err(TensorError::Domain(format!(
                    "{what} coordinate out of [-0.5, {dim}-0.5]"
                )));
            }
        }
        Ok(WarpGrid { rows, cols })
    }

    pub fn rows(&self) -> &[T] {
        &self.rows
    }
    pub fn cols(&self) -> &[T] {
        &self.cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Average all attention channels (deterministic).
    Structure,
    /// Use one selected attention channel.
    Detail,
}

/// Sampler settings. `epsilon` is the marginal floor expressed as a fraction
/// of the raw marginal's mean, added to every bin to keep the CDF strictly
/// increasing.
#[derive(Debug, Clone)]
pub struct SamplerConfig<T> {
    pub decomposition: Decomposition,
    pub epsilon: T,
    pub out_h: usize,
    pub out_w: usize,
    pub strategy: SelectionStrategy,
}

impl<T: Real> SamplerConfig<T> {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        SamplerConfig {
            decomposition: Decomposition::Max,
            epsilon: T::from_f64_lossy(0.01),
            out_h,
            out_w,
            strategy: SelectionStrategy::Random,
        }
    }
}

/// Per-position mean over the channels of an attention stack. Negative
/// entries (numerical noise from upstream) are clamped to zero.
pub fn average_attention<T: Real>(stack: &AttentionStack<T>) -> AttentionMap<T> {
    let (c, h, w) = (stack.channels(), stack.height(), stack.width());
    let hw = h * w;
    let inv = T::one() / T::from_usize_lossy(c);
    let data = (0..hw)
        .map(|p| {
            let mut s = T::zero();
            for ch in 0..c {
                s += stack.channel(ch)[p];
            }
            (s * inv).max(T::zero())
        })
        .collect();
    AttentionMap {
        height: h,
        width: w,
        data,
    }
}

/// Pick one channel of the stack according to `strategy`.
pub fn select_attention<T: Real>(
    stack: &AttentionStack<T>,
    strategy: SelectionStrategy,
    rng: &mut impl Rng,
) -> Result<(AttentionMap<T>, usize)> {
    let c = stack.channels();
    let index = match strategy {
        SelectionStrategy::Fixed(i) => {
            if i >= c {
                return Err(TensorError::Usage(format!(
                    "fixed attention index {i} out of range for {c} channels"
                )));
            }
            i
        }
        SelectionStrategy::Random => rng.gen_range(0..c),
        SelectionStrategy::ResponseRanked => {
            let responses: Vec<f64> = (0..c)
                .map(|i| {
                    stack.channel(i)
                        .iter()
                        .map(|v| v.to_f64_lossy().max(0.0))
                        .sum()
                })
                .collect();
            let total: f64 = responses.iter().sum();
            if total <= 0.0 {
                rng.gen_range(0..c)
            } else {
                let mut u = rng.gen::<f64>() * total;
                let mut pick = c - 1;
                for (i, r) in responses.iter().enumerate() {
                    if u < *r {
                        pick = i;
                        break;
                    }
                    u -= r;
                }
                pick
            }
        }
    };
    let data = stack.channel(index).iter().map(|v| v.max(T::zero())).collect();
    Ok((
        AttentionMap {
            height: stack.height(),
            width: stack.width(),
            data,
        },
        index,
    ))
}

/// Reduce the map to one weight per column (axis x) or row (axis y), then
/// add `epsilon * mean(raw marginal)` to every bin. An all-zero raw marginal
/// falls back to the uniform marginal.
pub fn marginal<T: Real>(
    map: &AttentionMap<T>,
    axis: Axis,
    decomposition: Decomposition,
    epsilon: T,
) -> Vec<T> {
    let (h, w) = (map.height, map.width);
    let n = match axis {
        Axis::X => w,
        Axis::Y => h,
    };
    let mut raw = vec![T::zero(); n];
    match (axis, decomposition) {
        (Axis::X, Decomposition::Max) => {
            for r in 0..h {
                for c in 0..w {
                    raw[c] = raw[c].max(map.data[r * w + c]);
                }
            }
        }
        (Axis::X, Decomposition::Sum) => {
            for r in 0..h {
                for c in 0..w {
                    raw[c] += map.data[r * w + c];
                }
            }
        }
        (Axis::Y, Decomposition::Max) => {
            for r in 0..h {
                for c in 0..w {
                    raw[r] = raw[r].max(map.data[r * w + c]);
                }
            }
        }
        (Axis::Y, Decomposition::Sum) => {
            for r in 0..h {
                for c in 0..w {
                    raw[r] += map.data[r * w + c];
                }
            }
        }
    }
    let total: T = raw.iter().copied().sum();
    if total <= T::zero() {
        return vec![T::one(); n];
    }
    if epsilon > T::zero() {
        let floor = epsilon * total / T::from_usize_lossy(n);
        for v in raw.iter_mut() {
            *v += floor;
        }
    }
    raw
}

/// Prefix-sum integral of a marginal: `F(0) = 0`, `F(k) = sum of the first k
/// bins`, linear between knots.
pub fn build_cdf<T: Real>(marginal: &[T], axis: Axis) -> Result<MarginalCdf<T>> {
    if marginal.is_empty() || marginal.iter().any(|&v| v < T::zero()) {
        return Err(TensorError::Domain(
            "marginal must be non-empty and non-negative".into(),
        ));
    }
    let mut knots = Vec::with_capacity(marginal.len() + 1);
    let mut acc = T::zero();
    knots.push(acc);
    for &v in marginal {
        acc += v;
        knots.push(acc);
    }
    if !(acc > T::zero()) {
        return Err(TensorError::Domain("marginal has non-positive total".into()));
    }
    Ok(MarginalCdf { axis, knots })
}

/// Inverse-transform sampling of the CDF: for output index `i` the target is
/// `u = (i + 0.5) * F(n) / out_len`, solved for `t` with `F(t) = u` over the
/// piecewise-linear knots (flat segments resolve to their left endpoint).
/// The returned source coordinates `t * source_len / n - 0.5` are
/// non-decreasing and clamped to `[-0.5, source_len - 0.5]`.
pub fn invert_cdf<T: Real>(cdf: &MarginalCdf<T>, out_len: usize, source_len: usize) -> Vec<T> {
    let n = cdf.bins();
    let knots = &cdf.knots;
    let total = cdf.total();
    let half = T::from_f64_lossy(0.5);
    let scale = T::from_usize_lossy(source_len) / T::from_usize_lossy(n);
    let lo = -half;
    let hi = T::from_usize_lossy(source_len) - half;
    (0..out_len)
        .map(|i| {
            let u = (T::from_usize_lossy(i) + half) * total / T::from_usize_lossy(out_len);
            // First segment [k, k+1] whose right knot reaches u.
            let k = knots[1..].partition_point(|f| *f < u).min(n - 1);
            let (f0, f1) = (knots[k], knots[k + 1]);
            let t = if f1 > f0 {
                T::from_usize_lossy(k) + ((u - f0) / (f1 - f0)).min(T::one()).max(T::zero())
            } else {
                T::from_usize_lossy(k)
            };
            (t * scale - half).min(hi).max(lo)
        })
        .collect()
}

fn bilinear_at<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let yf = y.floor();
    let xf = x.floor();
    let wy = y - yf;
    let wx = x - xf;
    let clampi = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let y0 = clampi(yf.to_f64_lossy(), h);
    let y1 = clampi(yf.to_f64_lossy() + 1.0, h);
    let x0 = clampi(xf.to_f64_lossy(), w);
    let x1 = clampi(xf.to_f64_lossy() + 1.0, w);
    let one = T::one();
    let top = plane[y0 * w + x0] * (one - wx) + plane[y0 * w + x1] * wx;
    let bot = plane[y1 * w + x0] * (one - wx) + plane[y1 * w + x1] * wx;
    top * (one - wy) + bot * wy
}

/// Resample the image at the grid coordinates by bilinear interpolation with
/// edge clamping.
pub fn warp<T: Real>(image: &ImageBuffer<T>, grid: &WarpGrid<T>) -> Result<ImageBuffer<T>> {
    let (h, w) = (image.height, image.width);
    let half = T::from_f64_lossy(0.5);
    let ok = |coords: &[T], dim: usize| {
        coords
            .iter()
            .all(|&c| c >= -half && c <= T::from_usize_lossy(dim) - half)
    };
    if !ok(&grid.rows, h) || !ok(&grid.cols, w) {
        return Err(TensorError::Domain("warp grid out of source bounds".into()));
    }
    let (oh, ow) = (grid.rows.len(), grid.cols.len());
    let mut data = Vec::with_capacity(image.channels * oh * ow);
    for c in 0..image.channels {
        let plane = image.plane(c);
        for &ry in &grid.rows {
            for &cx in &grid.cols {
                // Clamp interpolation of in-range pixels back into [0,1].
                let v = bilinear_at(plane, h, w, ry, cx);
                data.push(v.min(T::one()).max(T::zero()));
            }
        }
    }
    ImageBuffer::new(oh, ow, image.channels, data)
}

/// Plain bilinear resize (the uniform-sampler baseline), pixel-center
/// convention.
pub fn bilinear_resize<T: Real>(
    image: &ImageBuffer<T>,
    out_h: usize,
    out_w: usize,
) -> Result<ImageBuffer<T>> {
    let half = T::from_f64_lossy(0.5);
    let coords = |out: usize, src: usize| {
        (0..out)
            .map(|i| {
                (T::from_usize_lossy(i) + half) * T::from_usize_lossy(src)
                    / T::from_usize_lossy(out)
                    - half
            })
            .collect::<Vec<_>>()
    };
    let (h, w) = (image.height, image.width);
    let rows = coords(out_h, h);
    let cols = coords(out_w, w);
    let mut data = Vec::with_capacity(image.channels * out_h * out_w);
    for c in 0..image.channels {
        let plane = image.plane(c);
        for &ry in &rows {
            for &cx in &cols {
                let v = bilinear_at(plane, h, w, ry, cx);
                data.push(v.min(T::one()).max(T::zero()));
            }
        }
    }
    ImageBuffer::new(out_h, out_w, image.channels, data)
}

/// Bilinearly resize an attention map (used to bring attention up to image
/// resolution before marginal computation).
pub fn resize_map<T: Real>(map: &AttentionMap<T>, out_h: usize, out_w: usize) -> AttentionMap<T> {
    let half = T::from_f64_lossy(0.5);
    let coords = |out: usize, src: usize| {
        (0..out)
            .map(|i| {
                (T::from_usize_lossy(i) + half) * T::from_usize_lossy(src)
                    / T::from_usize_lossy(out)
                    - half
            })
            .collect::<Vec<_>>()
    };
    let rows = coords(out_h, map.height);
    let cols = coords(out_w, map.width);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &ry in &rows {
        for &cx in &cols {
            data.push(bilinear_at(&map.data, map.height, map.width, ry, cx).max(T::zero()));
        }
    }
    AttentionMap {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Build the warp grid for an attention map already at image resolution.
pub fn attention_grid<T: Real>(
    map: &AttentionMap<T>,
    config: &SamplerConfig<T>,
) -> Result<WarpGrid<T>> {
    let mx = marginal(map, Axis::X, config.decomposition, config.epsilon);
    let my = marginal(map, Axis::Y, config.decomposition, config.epsilon);
    let cdf_x = build_cdf(&mx, Axis::X)?;
    let cdf_y = build_cdf(&my, Axis::Y)?;
    let cols = invert_cdf(&cdf_x, config.out_w, map.width);
    let rows = invert_cdf(&cdf_y, config.out_h, map.height);
    WarpGrid::new(rows, cols, map.height, map.width)
}

/// Full attention-guided sampling: pick or average the attention, upsample
/// it to image resolution, derive per-axis CDFs, invert, and warp.
///
/// Returns the sampled image and, in detail mode, the chosen channel index.
pub fn sample<T: Real>(
    image: &ImageBuffer<T>,
    stack: &AttentionStack<T>,
    mode: SampleMode,
    config: &SamplerConfig<T>,
    rng: &mut impl Rng,
) -> Result<(ImageBuffer<T>, Option<usize>)> {
    let (map, index) = match mode {
        SampleMode::Structure => (average_attention(stack), None),
        SampleMode::Detail => {
            let (m, i) = select_attention(stack, config.strategy, rng)?;
            (m, Some(i))
        }
    };
    let map = if map.height == image.height && map.width == image.width {
        map
    } else {
        resize_map(&map, image.height, image.width)
    };
    let grid = attention_grid(&map, config)?;
    Ok((warp(image, &grid)?, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(c: usize, h: usize, w: usize, data: Vec<f64>) -> AttentionStack<f64> {
        AttentionStack::new(Tensor::new(vec![c, h, w], data).unwrap()).unwrap()
    }

    fn gray(h: usize, w: usize, data: Vec<f64>) -> ImageBuffer<f64> {
        ImageBuffer::new(h, w, 1, data).unwrap()
    }

    fn random_gray(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer<f64> {
        gray(h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect())
    }

    /// Dense-scan inversion oracle: walk 10^4 points along the piecewise
    /// linear CDF to bracket the first t with F(t) >= u, then bisect the
    /// bracket down to ~1e-12.
    fn dense_invert(knots: &[f64], out_len: usize, source_len: usize) -> Vec<f64> {
        let n = knots.len() - 1;
        let total = knots[n];
        let eval = |t: f64| {
            let k = (t.floor() as usize).min(n - 1);
            knots[k] + (knots[k + 1] - knots[k]) * (t - k as f64)
        };
        let steps = 10_000usize;
        (0..out_len)
            .map(|i| {
                let u = (i as f64 + 0.5) * total / out_len as f64;
                let mut t = n as f64;
                for s in 0..=steps {
                    let tt = n as f64 * s as f64 / steps as f64;
                    if eval(tt) >= u {
                        let mut lo = tt - n as f64 / steps as f64;
                        let mut hi = tt;
                        if s == 0 {
                            lo = 0.0;
                        }
                        for _ in 0..100 {
                            let mid = 0.5 * (lo + hi);
                            if eval(mid) >= u {
                                hi = mid;
                            } else {
                                lo = mid;
                            }
                        }
                        t = hi;
                        break;
                    }
                }
                (t * source_len as f64 / n as f64 - 0.5)
                    .min(source_len as f64 - 0.5)
                    .max(-0.5)
            })
            .collect()
    }

    #[test]
    fn average_attention_means_channels() {
        let s = stack(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let m = average_attention(&s);
        assert_eq!(m.data(), &[0.5, 0.5]);

        let s1 = stack(1, 1, 2, vec![0.3, 0.7]);
        assert_eq!(average_attention(&s1).data(), &[0.3, 0.7]);
    }

    #[test]
    fn average_attention_matches_direct_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..4 * 9).map(|_| rng.gen::<f64>()).collect();
        let s = stack(4, 3, 3, data.clone());
        let m = average_attention(&s);
        for p in 0..9 {
            let want: f64 = (0..4).map(|c| data[c * 9 + p]).sum::<f64>() / 4.0;
            assert!((m.data()[p] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn select_single_channel_always_zero() {
        let s = stack(1, 1, 2, vec![1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for strategy in [SelectionStrategy::Random, SelectionStrategy::ResponseRanked] {
            let (_, i) = select_attention(&s, strategy, &mut rng).unwrap();
            assert_eq!(i, 0);
        }
    }

    #[test]
    fn select_random_is_uniform() {
        let s = stack(4, 1, 2, vec![1.0; 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            let (_, i) = select_attention(&s, SelectionStrategy::Random, &mut rng).unwrap();
            counts[i] += 1;
        }
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((f - 0.25).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn select_ranked_is_proportional_to_response() {
        // channel responses 3 and 1 -> index 0 with probability 3/4
        let s = stack(2, 1, 2, vec![1.5, 1.5, 0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut zero = 0usize;
        for _ in 0..100_000 {
            let (_, i) =
                select_attention(&s, SelectionStrategy::ResponseRanked, &mut rng).unwrap();
            if i == 0 {
                zero += 1;
            }
        }
        let f = zero as f64 / 100_000.0;
        assert!((f - 0.75).abs() < 0.01, "frequency {f}");
    }

    #[test]
    fn select_fixed_out_of_range_is_error() {
        let s = stack(2, 1, 2, vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(select_attention(&s, SelectionStrategy::Fixed(2), &mut rng).is_err());
        let (_, i) = select_attention(&s, SelectionStrategy::Fixed(1), &mut rng).unwrap();
        assert_eq!(i, 1);
    }

    #[test]
    fn marginal_max_per_column() {
        let m = AttentionMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(marginal(&m, Axis::X, Decomposition::Max, 0.0), vec![1.0, 1.0]);
    }

    #[test]
    fn marginal_sum_per_column() {
        let m = AttentionMap::new(2, 2, vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(marginal(&m, Axis::X, Decomposition::Sum, 0.0), vec![0.0, 4.0]);
    }

    #[test]
    fn marginal_all_zero_falls_back_to_uniform() {
        let m = AttentionMap::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(marginal(&m, Axis::X, Decomposition::Max, 0.0), vec![1.0, 1.0]);
        assert_eq!(marginal(&m, Axis::Y, Decomposition::Sum, 0.01), vec![1.0, 1.0]);
    }

    #[test]
    fn build_cdf_is_prefix_sum() {
        let cdf = build_cdf(&[1.0, 1.0, 1.0, 1.0], Axis::X).unwrap();
        assert_eq!(cdf.knots(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let cdf = build_cdf(&[0.0, 2.0, 2.0, 0.0], Axis::X).unwrap();
        assert_eq!(cdf.knots(), &[0.0, 0.0, 2.0, 4.0, 4.0]);
        assert_eq!(cdf.total(), 4.0);
        assert!(build_cdf(&[0.0, 0.0], Axis::X).is_err());
    }

    #[test]
    fn invert_uniform_cdf_is_identity_sampling() {
        let cdf = build_cdf::<f64>(&[1.0; 4], Axis::X).unwrap();
        let coords = invert_cdf(&cdf, 4, 4);
        for (a, b) in coords.iter().zip(&[0.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invert_step_cdf_frozen_values() {
        let cdf = build_cdf::<f64>(&[0.0, 2.0, 2.0, 0.0], Axis::X).unwrap();
        let coords = invert_cdf(&cdf, 4, 4);
        for (a, b) in coords.iter().zip(&[0.75, 1.25, 1.75, 2.25]) {
            assert!((a - b).abs() < 1e-6);
        }
        let dense = dense_invert(cdf.knots(), 4, 4);
        for (a, b) in coords.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invert_single_output_is_median() {
        let cdf = build_cdf(&[1.0, 3.0, 1.0, 1.0, 2.0], Axis::X).unwrap();
        let coords = invert_cdf(&cdf, 1, 5);
        let dense = dense_invert(cdf.knots(), 1, 5);
        assert!((coords[0] - dense[0]).abs() < 1e-3);
    }

    #[test]
    fn invert_matches_dense_oracle_on_random_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let n = rng.gen_range(3..12);
            let marg: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.01).collect();
            let cdf = build_cdf(&marg, Axis::Y).unwrap();
            let out = rng.gen_range(1..10);
            let coords = invert_cdf(&cdf, out, n);
            let dense = dense_invert(cdf.knots(), out, n);
            for (a, b) in coords.iter().zip(&dense) {
                assert!((a - b).abs() < 1e-3);
            }
            for pair in coords.windows(2) {
                assert!(pair[1] >= pair[0]);
            }
        }
    }

    #[test]
    fn flat_segment_inverts_to_left_endpoint() {
        // knots [0,2,2,4,4]; u = 2 lands exactly on the flat segment [1, 2],
        // which resolves to its left endpoint t = 1.
        let cdf = build_cdf::<f64>(&[2.0, 0.0, 2.0, 0.0], Axis::X).unwrap();
        let coords = invert_cdf(&cdf, 1, 4);
        assert!((coords[0] - 0.5).abs() < 1e-12);
        // And u values inside sloped segments interpolate linearly.
        let coords = invert_cdf(&cdf, 2, 4);
        assert!((coords[0] - 0.0).abs() < 1e-12); // u=1 -> t=0.5
        assert!((coords[1] - 2.0).abs() < 1e-12); // u=3 -> t=2.5
    }

    #[test]
    fn warp_identity_grid_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_gray(&mut rng, 4, 5);
        let rows: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let cols: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let grid = WarpGrid::new(rows, cols, 4, 5).unwrap();
        let out = warp(&img, &grid).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn warp_constant_image_stays_constant() {
        let img = gray(3, 3, vec![0.4; 9]);
        let grid = WarpGrid::new(vec![-0.5, 0.7, 2.5], vec![0.1, 1.9], 3, 3).unwrap();
        let out = warp(&img, &grid).unwrap();
        for &v in out.data() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_matches_per_pixel_bilinear_oracle() {
        // 4x4 ramp image warped by the grid from the [0,2,2,0] marginal.
        let img = gray(4, 4, (0..16).map(|i| i as f64 / 15.0).collect());
        let cdf = build_cdf(&[0.0, 2.0, 2.0, 0.0], Axis::X).unwrap();
        let coords = invert_cdf(&cdf, 4, 4);
        let grid = WarpGrid::new(coords.clone(), coords.clone(), 4, 4).unwrap();
        let out = warp(&img, &grid).unwrap();
        for (i, &ry) in coords.iter().enumerate() {
            for (j, &cx) in coords.iter().enumerate() {
                let y0 = ry.floor().max(0.0) as usize;
                let x0 = cx.floor().max(0.0) as usize;
                let (y1, x1) = ((y0 + 1).min(3), (x0 + 1).min(3));
                let (wy, wx) = (ry - ry.floor(), cx - cx.floor());
                let top = img.data()[y0 * 4 + x0] * (1.0 - wx) + img.data()[y0 * 4 + x1] * wx;
                let bot = img.data()[y1 * 4 + x0] * (1.0 - wx) + img.data()[y1 * 4 + x1] * wx;
                let want = top * (1.0 - wy) + bot * wy;
                assert!((out.data()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_attention_sampling_equals_bilinear_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let img = random_gray(&mut rng, 8, 10);
            let s = stack(2, 3, 3, vec![0.7; 18]);
            for (oh, ow) in [(4, 4), (8, 10), (3, 7)] {
                let cfg = SamplerConfig::new(oh, ow);
                let (out, idx) =
                    sample(&img, &s, SampleMode::Structure, &cfg, &mut rng).unwrap();
                assert!(idx.is_none());
                let want = bilinear_resize(&img, oh, ow).unwrap();
                for (a, b) in out.data().iter().zip(want.data()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn structure_mode_is_deterministic() {
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let img = random_gray(&mut rng1, 6, 6);
        let s = stack(2, 3, 3, (0..18).map(|i| i as f64).collect());
        let cfg = SamplerConfig::new(4, 4);
        let (a, _) = sample(&img, &s, SampleMode::Structure, &cfg, &mut rng1).unwrap();
        let (b, _) = sample(&img, &s, SampleMode::Structure, &cfg, &mut rng2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn detail_hotspot_concentrates_samples() {
        // One hot 2x2 corner region in an 8x8 map; with epsilon = 0.05 at
        // least 60% of the sample coordinates fall into the hot rows/cols.
        let mut data = vec![0.0; 64];
        for r in 0..2 {
            for c in 0..2 {
                data[r * 8 + c] = 1.0;
            }
        }
        let s = stack(1, 8, 8, data);
        let img = gray(16, 16, vec![0.5; 256]);
        let mut cfg = SamplerConfig::new(16, 16);
        cfg.epsilon = 0.05;
        cfg.strategy = SelectionStrategy::Fixed(0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (_, idx) = sample(&img, &s, SampleMode::Detail, &cfg, &mut rng).unwrap();
        assert_eq!(idx, Some(0));
        // Recompute the grid directly to count coordinates.
        let map = resize_map(&average_attention(&s), 16, 16);
        let grid = attention_grid(&map, &cfg).unwrap();
        // Hot region covers the first quarter of each axis of the source.
        let hot = |coords: &[f64]| coords.iter().filter(|&&v| v <= 4.0).count();
        assert!(hot(grid.rows()) * 10 >= 16 * 6, "rows {:?}", grid.rows());
        assert!(hot(grid.cols()) * 10 >= 16 * 6, "cols {:?}", grid.cols());
    }

    #[test]
    fn mass_proportionality() {
        for p in [0.25f64, 0.5, 0.75] {
            for out_len in [8usize, 16, 64] {
                // 20-bin step marginal: first 10 bins carry fraction p.
                let n = 20usize;
                let hi = p / 10.0;
                let lo = (1.0 - p) / 10.0;
                let marg: Vec<f64> = (0..n).map(|i| if i < 10 { hi } else { lo }).collect();
                let cdf = build_cdf(&marg, Axis::X).unwrap();
                let coords = invert_cdf(&cdf, out_len, n);
                let inside = coords.iter().filter(|&&c| c < 9.5).count() as f64;
                let want = (p * out_len as f64).round();
                assert!(
                    (inside - want).abs() <= 1.0,
                    "p={p} out={out_len} inside={inside} want={want}"
                );
            }
        }
    }

    #[test]
    fn scale_invariance_power_of_two_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
        let m = AttentionMap::new(6, 6, data.clone()).unwrap();
        let cfg = SamplerConfig::new(5, 7);
        let g1 = attention_grid(&m, &cfg).unwrap();
        for factor in [2.0, 0.5, 1024.0] {
            let scaled =
                AttentionMap::new(6, 6, data.iter().map(|v| v * factor).collect()).unwrap();
            let g2 = attention_grid(&scaled, &cfg).unwrap();
            assert_eq!(g1.rows(), g2.rows());
            assert_eq!(g1.cols(), g2.cols());
        }
        // Arbitrary positive factors cancel up to rounding.
        for factor in [3.1, 0.007, 591.3] {
            let scaled =
                AttentionMap::new(6, 6, data.iter().map(|v| v * factor).collect()).unwrap();
            let g2 = attention_grid(&scaled, &cfg).unwrap();
            for (a, b) in g1.rows().iter().zip(g2.rows()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn image_buffer_validates_range() {
        assert!(ImageBuffer::new(2, 2, 1, vec![0.0, 0.5, 1.0, 1.1]).is_err());
        assert!(ImageBuffer::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageBuffer::new(1, 2, 1, vec![0.0, 0.0]).is_err());
    }
}
