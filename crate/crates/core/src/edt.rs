//! Exact Euclidean distance transform (Felzenszwalb & Huttenlocher lower
//! envelope of parabolas), separable over axes, with per-axis spacing.

/// Squared distance from every element to the nearest `true` site.
///
/// `dims` is C-order; `spacing[d]` is the physical step along axis `d`.
/// Elements get `f64::INFINITY` when there are no sites at all.
pub fn squared_edt(sites: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    assert_eq!(dims.len(), spacing.len());
    assert_eq!(sites.len(), dims.iter().product::<usize>());
    let mut f: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    if f.is_empty() {
        return f;
    }
    let max_len = *dims.iter().max().unwrap();
    let mut line = vec![0.0; max_len];
    let mut out = vec![0.0; max_len];
    let mut scratch = Envelope::with_capacity(max_len);
    for axis in 0..dims.len() {
        let len = dims[axis];
        let stride: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * len * stride + inner;
                for i in 0..len {
                    line[i] = f[base + i * stride];
                }
                scratch.transform(&line[..len], spacing[axis], &mut out[..len]);
                for i in 0..len {
                    f[base + i * stride] = out[i];
                }
            }
        }
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            v: Vec::with_capacity(n),
            z: Vec::with_capacity(n + 1),
        }
    }

    /// `out[p] = min_q (s·(p−q))² + f[q]` over finite `f[q]`.
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        let pos = |i: usize| i as f64 * s;
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                let Some(&v) = self.v.last() else {
                    self.v.push(q);
                    self.z.push(f64::NEG_INFINITY);
                    break;
                };
                let intersect = ((f[q] + pos(q) * pos(q)) - (f[v] + pos(v) * pos(v)))
                    / (2.0 * (pos(q) - pos(v)));
                if intersect <= *self.z.last().unwrap() {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(intersect);
                    break;
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            let x = pos(p);
            while k + 1 < self.v.len() && self.z[k + 1] < x {
                k += 1;
            }
            let d = x - pos(self.v[k]);
            *o = d * d + f[self.v[k]];
        }
    }
}

/// Euclidean distance (not squared) to the nearest site.
pub fn edt(sites: &[bool], dims: &[usize], spacing: &[f64]) -> Vec<f64> {
    squared_edt(sites, dims, spacing)
        .into_iter()
        .map(f64::sqrt)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_site_line() {
        let sites = [false, false, true, false, false, false];
        let d = squared_edt(&sites, &[6], &[1.0]);
        assert_eq!(d, vec![4.0, 1.0, 0.0, 1.0, 4.0, 9.0]);
    }

    #[test]
    fn anisotropic_plane() {
        let mut sites = vec![false; 9];
        sites[4] = true; // centre of 3x3
        let d = squared_edt(&sites, &[3, 3], &[2.0, 1.0]);
        assert_eq!(d[0], 4.0 + 1.0);
        assert_eq!(d[1], 4.0);
        assert_eq!(d[3], 1.0);
    }

    #[test]
    fn no_sites_is_infinite() {
        let d = squared_edt(&[false; 4], &[2, 2], &[1.0, 1.0]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }
}
