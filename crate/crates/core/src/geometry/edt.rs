//! Exact squared Euclidean distance transform (Felzenszwalb–Huttenlocher),
//! separable over axes with anisotropic spacing.

use crate::volume::Geometry;

/// Lower envelope of parabolas along one line. `f` holds squared distances
/// (`INFINITY` for no site); sample `q` sits at `q * h`.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let pos = |q: usize| q as f64 * h;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared distance (mm²) from every voxel centre to the nearest voxel
/// flagged in `sites`; `INFINITY` everywhere when `sites` is empty.
pub fn squared_edt(geom: &Geometry, sites: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = geom.dims;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let maxn = nx.max(ny).max(nz);
    let mut line = vec![0.0; maxn];
    let mut out = vec![0.0; maxn];
    let mut v = vec![0usize; maxn];
    let mut z = vec![0.0; maxn + 1];
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = geom.dims[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..geom.dims[ob] {
            for a in 0..geom.dims[oa] {
                let base = a * strides[oa] + b * strides[ob];
                for q in 0..n {
                    line[q] = d[base + q * strides[axis]];
                }
                edt_1d(&line[..n], geom.spacing[axis], &mut out[..n], &mut v, &mut z);
                for q in 0..n {
                    d[base + q * strides[axis]] = out[q];
                }
            }
        }
    }
    d
}

/// Distance (mm) from each foreground voxel to the nearest background voxel,
/// with the space beyond the lattice counted as background. Background
/// voxels get 0.
pub fn inside_distance(geom: &Geometry, mask: &[u8]) -> Vec<f64> {
    let bg: Vec<bool> = mask.iter().map(|&m| m == 0).collect();
    let sq = squared_edt(geom, &bg);
    let [nx, ny, nz] = geom.dims;
    let s = geom.spacing;
    let mut out = vec![0.0; mask.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = geom.index(i, j, k);
                if mask[idx] == 0 {
                    continue;
                }
                let border = [
                    (i + 1) as f64 * s[0],
                    (nx - i) as f64 * s[0],
                    (j + 1) as f64 * s[1],
                    (ny - j) as f64 * s[1],
                    (k + 1) as f64 * s[2],
                    (nz - k) as f64 * s[2],
                ]
                .into_iter()
                .fold(f64::INFINITY, f64::min);
                out[idx] = sq[idx].sqrt().min(border);
            }
        }
    }
    out
}
