//! Inner loops shared by the forward and backward passes.

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `da += dc · bᵀ`.
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dav) in darow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in dcrow.iter().zip(brow) {
                acc += x * y;
            }
            *dav += acc;
        }
    }
}

/// `db += aᵀ · dc`.
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &d) in dbrow.iter_mut().zip(dcrow) {
                *dbv += av * d;
            }
        }
    }
}

/// Geometry of a same-padded depthwise convolution over a token-major
/// feature map (`h·w` rows, `channels` columns).
#[derive(Clone, Copy, Debug)]
pub(crate) struct DepthwiseGeom {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseGeom {
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = (self.kernel / 2) as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        for i in 0..h {
            for j in 0..w {
                let out_row = (i * w + j) as usize;
                for a in 0..self.kernel as isize {
                    let si = i + a - pad;
                    if si < 0 || si >= h {
                        continue;
                    }
                    for b in 0..self.kernel as isize {
                        let sj = j + b - pad;
                        if sj < 0 || sj >= w {
                            continue;
                        }
                        let tap = (a * self.kernel as isize + b) as usize;
                        f(out_row, (si * w + sj) as usize, tap);
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; self.h * self.w * c];
        self.for_each_tap(|o, s, t| {
            let orow = &mut out[o * c..(o + 1) * c];
            let srow = &x[s * c..(s + 1) * c];
            let krow = &k[t * c..(t + 1) * c];
            for ((ov, &sv), &kv) in orow.iter_mut().zip(srow).zip(krow) {
                *ov += sv * kv;
            }
        });
        out
    }

    pub fn backward(&self, x: &[f64], k: &[f64], dy: &[f64], dx: Option<&mut [f64]>, dk: Option<&mut [f64]>) {
        let c = self.channels;
        if let Some(dx) = dx {
            self.for_each_tap(|o, s, t| {
                let drow = &dy[o * c..(o + 1) * c];
                let krow = &k[t * c..(t + 1) * c];
                let dxrow = &mut dx[s * c..(s + 1) * c];
                for ((d, &g), &kv) in dxrow.iter_mut().zip(drow).zip(krow) {
                    *d += g * kv;
                }
            });
        }
        if let Some(dk) = dk {
            self.for_each_tap(|o, s, t| {
                let drow = &dy[o * c..(o + 1) * c];
                let srow = &x[s * c..(s + 1) * c];
                let dkrow = &mut dk[t * c..(t + 1) * c];
                for ((d, &g), &sv) in dkrow.iter_mut().zip(drow).zip(srow) {
                    *d += g * sv;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let g = DepthwiseGeom {
            h: 3,
            w: 4,
            channels: 2,
            kernel: 3,
        };
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let mut k = vec![0.0; 9 * 2];
        k[4 * 2] = 1.0;
        k[4 * 2 + 1] = 1.0;
        assert_eq!(g.forward(&x, &k), x);
    }
}
