//! Fixed linear resampling operators over row-major grids.
//!
//! A grid of `h × w` cells with `c` channels is stored as an `(h·w) × c`
//! tensor. Resizing and pooling are linear in the cells, so each operator is
//! a sparse `out_cells × in_cells` matrix applied to every channel.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    in_cells: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl LinearMap {
    pub fn in_cells(&self) -> usize {
        self.in_cells
    }

    pub fn out_cells(&self) -> usize {
        self.rows.len()
    }

    #[cfg(test)]
    pub(crate) fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Half-pixel-centre bilinear resize by an integer factor, edge-clamped
    /// (the `align_corners = false` convention).
    pub fn bilinear_upsample(h: usize, w: usize, factor: usize) -> Self {
        let (oh, ow) = (h * factor, w * factor);
        let axis = |out: usize, size: usize| -> (usize, usize, f64) {
            let src = ((out as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, src - i0 as f64)
        };
        let mut rows = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, h);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, w);
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                for (idx, wt) in [
                    (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                    (y0 * w + x1, (1.0 - fy) * fx),
                    (y1 * w + x0, fy * (1.0 - fx)),
                    (y1 * w + x1, fy * fx),
                ] {
                    if wt == 0.0 {
                        continue;
                    }
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += wt,
                        None => taps.push((idx, wt)),
                    }
                }
                rows.push(taps);
            }
        }
        LinearMap { in_cells: h * w, rows }
    }

    pub fn nearest_upsample(h: usize, w: usize, factor: usize) -> Self {
        let ow = w * factor;
        let rows = (0..h * factor * ow)
            .map(|o| {
                let (y, x) = (o / ow, o % ow);
                vec![((y / factor) * w + x / factor, 1.0)]
            })
            .collect();
        LinearMap { in_cells: h * w, rows }
    }

    /// Non-overlapping `factor × factor` average pooling. `h` and `w` must be
    /// multiples of `factor`.
    pub fn avg_pool(h: usize, w: usize, factor: usize) -> Self {
        assert!(h.is_multiple_of(factor) && w.is_multiple_of(factor), "avg_pool: {h}x{w} not divisible by {factor}");
        let (oh, ow) = (h / factor, w / factor);
        let wt = 1.0 / (factor * factor) as f64;
        let rows = (0..oh * ow)
            .map(|o| {
                let (y, x) = (o / ow, o % ow);
                let mut taps = Vec::with_capacity(factor * factor);
                for dy in 0..factor {
                    for dx in 0..factor {
                        taps.push(((y * factor + dy) * w + x * factor + dx, wt));
                    }
                }
                taps
            })
            .collect();
        LinearMap { in_cells: h * w, rows }
    }

    /// Mean over all `in_cells`, broadcast to `out_cells` outputs.
    pub fn global_mean(in_cells: usize, out_cells: usize) -> Self {
        let wt = 1.0 / in_cells as f64;
        let row: Vec<(usize, f64)> = (0..in_cells).map(|i| (i, wt)).collect();
        LinearMap { in_cells, rows: vec![row; out_cells] }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.in_cells, "LinearMap input cells");
        let c = x.cols();
        let mut out = Tensor::zeros(self.rows.len(), c);
        for (o, taps) in self.rows.iter().enumerate() {
            let dst = out.row_mut(o);
            for &(i, wt) in taps {
                for (d, s) in dst.iter_mut().zip(x.row(i)) {
                    *d += wt * s;
                }
            }
        }
        out
    }

    /// `Mᵀ · g`, accumulated into `out`.
    pub(crate) fn apply_transpose_into(&self, g: &Tensor, out: &mut Tensor) {
        for (o, taps) in self.rows.iter().enumerate() {
            let src = g.row(o);
            for &(i, wt) in taps {
                for (d, s) in out.row_mut(i).iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
}
