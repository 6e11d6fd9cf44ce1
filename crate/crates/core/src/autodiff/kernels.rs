//! Dense loops behind the graph ops. All accumulate into `out` and run in a
//! fixed sequential order so results are bit-reproducible.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C×H×W]` into `[C·kh·kw × out_h·out_w]` with zero padding.
pub(crate) fn im2col(image: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let ncols = geo.col_cols();
    let pad = geo.padding as isize;
    for c in 0..geo.channels {
        let plane = &image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ky) as isize - pad;
                    let drow = &mut dst[oy * geo.out_w..(oy + 1) * geo.out_w];
                    if iy < 0 || iy >= geo.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= geo.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], geo: &ConvGeometry, image: &mut [f64]) {
    let ncols = geo.col_cols();
    let pad = geo.padding as isize;
    for c in 0..geo.channels {
        let plane = &mut image[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ky) as isize - pad;
                    if iy < 0 || iy >= geo.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kx) as isize - pad;
                        if ix >= 0 && (ix as usize) < geo.width {
                            drow[ix as usize] += src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `shape`, the flat index into the tensor obtained
/// by collapsing the axes where `keep[axis]` is false.
pub(crate) fn collapse_map(shape: &[usize], keep: &[bool]) -> Vec<usize> {
    let mut out_strides = vec![0; shape.len()];
    let mut acc = 1;
    for axis in (0..shape.len()).rev() {
        if keep[axis] {
            out_strides[axis] = acc;
            acc *= shape[axis];
        }
    }
    walk_index_map(shape, &out_strides)
}

/// Maps each flat index of `shape` to `Σ index[axis]·target_strides[axis]`.
pub(crate) fn walk_index_map(shape: &[usize], target_strides: &[usize]) -> Vec<usize> {
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    if n == 0 {
        return map;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            cur += target_strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            cur -= target_strides[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
    map
}
